"""Two-branch hash networks with per-modality sigmoid classifiers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ndmath as nd
from .errors import ParseError, ShapeError, SpecError

MODALITIES = ("image", "text")
CHECKPOINT_FORMAT = "scbch-checkpoint-v1"


@dataclass(frozen=True)
class BranchConfig:
    input_dim: int
    hidden_dim: int
    code_length: int
    num_layers: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise SpecError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.code_length < 8:
            raise SpecError(f"code_length must be >= 8, got {self.code_length}")
        if self.hidden_dim < self.code_length:
            raise SpecError("hidden_dim must be >= code_length")
        if self.input_dim < 1:
            raise SpecError("input_dim must be positive")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.code_length]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class ModelConfig:
    image: BranchConfig
    text: BranchConfig
    num_classes: int

    def __post_init__(self):
        if self.image.code_length != self.text.code_length:
            raise SpecError("both branches must emit the same code length")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")

    @property
    def code_length(self) -> int:
        return self.image.code_length

    @classmethod
    def default(cls, image_dim: int, text_dim: int, num_classes: int,
                code_length: int = 16, hidden_dim: int = 256) -> "ModelConfig":
        """Three FC layers on the image side, two on the text side."""
        return cls(
            image=BranchConfig(image_dim, hidden_dim, code_length, 3),
            text=BranchConfig(text_dim, hidden_dim, code_length, 2),
            num_classes=num_classes,
        )

    def branch(self, modality: str) -> BranchConfig:
        _check_modality(modality)
        return self.image if modality == "image" else self.text

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(image=BranchConfig(**d["image"]), text=BranchConfig(**d["text"]),
                   num_classes=int(d["num_classes"]))


def _check_modality(modality: str) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")


@dataclass
class HashModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def code_length(self) -> int:
        return self.config.code_length

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def bind(self, tape: nd.Tape) -> dict[str, nd.Matrix]:
        """Register every parameter as a leaf on ``tape``."""
        return {name: tape.parameter(value, name) for name, value in self.params.items()}

    def constants(self) -> dict[str, nd.Matrix]:
        return {name: nd.Matrix(value) for name, value in self.params.items()}

    def copy(self) -> "HashModel":
        return HashModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _layer_names(modality: str, k: int) -> tuple[str, str]:
    return f"{modality}.fc{k}.weight", f"{modality}.fc{k}.bias"


def _classifier_names(modality: str) -> tuple[str, str]:
    return f"cls_{modality}.weight", f"cls_{modality}.bias"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_parameters(config: ModelConfig, seed: int) -> HashModel:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for modality in MODALITIES:
        for k, (fan_in, fan_out) in enumerate(config.branch(modality).layer_dims()):
            w_name, b_name = _layer_names(modality, k)
            params[w_name] = _glorot(rng, fan_in, fan_out)
            params[b_name] = np.zeros((1, fan_out))
    for modality in MODALITIES:
        w_name, b_name = _classifier_names(modality)
        params[w_name] = _glorot(rng, config.code_length, config.num_classes)
        params[b_name] = np.zeros((1, config.num_classes))
    return HashModel(config, params)


def forward(model: HashModel, modality: str, x, bound: Mapping[str, nd.Matrix] | None = None) -> nd.Matrix:
    """Continuous codes ``tanh(f(x))`` for one modality.

    Pass ``bound`` (from :meth:`HashModel.bind`) to record on a tape.
    """
    branch = model.config.branch(modality)
    x = nd.as_matrix(x)
    if x.cols != branch.input_dim:
        raise ShapeError(f"{modality} branch expects {branch.input_dim} features, got {x.cols}")
    p = bound if bound is not None else model.constants()
    out = x
    last = branch.num_layers - 1
    for k in range(branch.num_layers):
        w_name, b_name = _layer_names(modality, k)
        out = nd.add(nd.matmul(out, p[w_name]), p[b_name])
        out = nd.tanh(out) if k == last else nd.relu(out)
    return out


def classify(model: HashModel, modality: str, h, bound: Mapping[str, nd.Matrix] | None = None) -> nd.Matrix:
    """Per-class probabilities ``sigmoid(h W + b)``."""
    _check_modality(modality)
    h = nd.as_matrix(h)
    if h.cols != model.code_length:
        raise ShapeError(f"classifier expects {model.code_length}-bit codes, got {h.cols}")
    p = bound if bound is not None else model.constants()
    w_name, b_name = _classifier_names(modality)
    return nd.sigmoid(nd.add(nd.matmul(h, p[w_name]), p[b_name]))


def encode(model: HashModel, modality: str, x: np.ndarray) -> np.ndarray:
    """Untaped forward pass returning a plain array."""
    return forward(model, modality, x).data


def save_checkpoint(model: HashModel, path, meta: Mapping | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "meta": dict(meta or {})}
    arrays = {f"param:{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[HashModel, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            params = {k[len("param:"):]: z[k].astype(np.float64) for k in z.files if k.startswith("param:")}
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    config = ModelConfig.from_dict(header["config"])
    expected = init_parameters(config, 0).params
    for name, ref in expected.items():
        if name not in params:
            raise ParseError(f"checkpoint missing parameter {name}")
        if params[name].shape != ref.shape:
            raise ParseError(f"parameter {name} has shape {params[name].shape}, expected {ref.shape}")
    return HashModel(config, {name: params[name] for name in expected}), header["meta"]
