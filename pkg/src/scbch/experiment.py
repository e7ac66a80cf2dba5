"""Experiment configuration and the generate -> train -> evaluate pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import retrieval as rt
from .dataset import (QUERY, RETRIEVAL, MultimodalDataset, NoiseSpec, SyntheticSpec,
                      apply_noise, generate_synthetic, load_features, split)
from .errors import CompatibilityError, ParseError, SpecError
from .losses import jaccard_matrix, similarity_matrix
from .model import HashModel, encode
from .trainer import TrainConfig, TrainState, train

DIRECTIONS = {"I2T": ("image", "text"), "T2I": ("text", "image")}


@dataclass
class EvalOptions:
    query_fraction: float = 0.1
    retrieval_fraction: float = 0.4
    split_seed: int = 0
    map_at: int | None = None
    pr_mode: str = "rank"
    track_map: bool = True

    def validate(self) -> None:
        if self.pr_mode not in ("rank", "radius"):
            raise SpecError(f"unknown pr_mode {self.pr_mode!r}")
        if self.map_at is not None and self.map_at < 1:
            raise SpecError("map_at must be positive")


@dataclass
class ExperimentConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    dataset_path: str | None = None
    output_dir: str = "runs/default"

    def validate(self) -> None:
        self.data.validate()
        self.noise.validate()
        self.train.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _reject_unknown(raw, {f.name for f in fields(cls)}, "config")
        sections = {"data": SyntheticSpec, "noise": NoiseSpec, "train": TrainConfig, "eval": EvalOptions}
        kwargs = {}
        for name, value in raw.items():
            if name in sections:
                if not isinstance(value, dict):
                    raise ParseError(f"section {name!r} must be a mapping", field=name)
                kind = sections[name]
                _reject_unknown(value, {f.name for f in fields(kind)}, name)
                kwargs[name] = kind(**value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
        if not isinstance(raw, dict):
            raise ParseError("config root must be a mapping")
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            data=replace(self.data, seed=seed),
            noise=replace(self.noise, seed=seed),
            train=replace(self.train, seed=seed),
            eval=replace(self.eval, split_seed=seed),
        )


def _reject_unknown(raw: dict, known: set[str], where: str) -> None:
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ParseError(f"unknown key(s) {', '.join(unknown)} in {where}", field=unknown[0])


def prepare_dataset(config: ExperimentConfig, base: MultimodalDataset | None = None) -> MultimodalDataset:
    """Load or synthesise features, split them, and corrupt the train rows."""
    if base is None:
        base = load_features(config.dataset_path) if config.dataset_path else generate_synthetic(config.data)
    data = split(base, config.eval.query_fraction, config.eval.retrieval_fraction, config.eval.split_seed)
    return apply_noise(data, config.noise)


def features(dataset: MultimodalDataset, modality: str) -> np.ndarray:
    return dataset.image_features if modality == "image" else dataset.text_features


def check_compatible(model: HashModel, dataset: MultimodalDataset) -> None:
    cfg = model.config
    have = (dataset.image_dim, dataset.text_dim, dataset.num_classes)
    want = (cfg.image.input_dim, cfg.text.input_dim, cfg.num_classes)
    if have != want:
        raise CompatibilityError(
            f"checkpoint expects (image_dim, text_dim, C) = {want}, dataset has {have}")


def retrieval_runs(model: HashModel, dataset: MultimodalDataset) -> dict[str, rt.RetrievalRun]:
    """Encode query and retrieval splits and rank in both directions."""
    check_compatible(model, dataset)
    q, r = dataset.indices(QUERY), dataset.indices(RETRIEVAL)
    runs = {}
    for direction, (src, dst) in DIRECTIONS.items():
        queries = rt.binarize(encode(model, src, features(dataset, src)[q]), q)
        index = rt.binarize(encode(model, dst, features(dataset, dst)[r]), r)
        runs[direction] = rt.run_retrieval(direction, queries, index,
                                           dataset.clean_labels[q], dataset.clean_labels[r])
    return runs


def evaluate(model: HashModel, dataset: MultimodalDataset, options: EvalOptions | None = None) -> dict:
    options = options or EvalOptions()
    runs = retrieval_runs(model, dataset)
    results = {d: rt.mean_average_precision(run, options.map_at) for d, run in runs.items()}
    return {
        "runs": runs,
        "results": results,
        "map_i2t": results["I2T"].map,
        "map_t2i": results["T2I"].map,
        "map_avg": 0.5 * (results["I2T"].map + results["T2I"].map),
    }


def map_tracker(dataset: MultimodalDataset, options: EvalOptions):
    """Epoch callback adding query-set MAP to every metrics record."""
    def callback(state: TrainState, record: dict) -> dict:
        ev = evaluate(state.model, dataset, options)
        return {"map_i2t": ev["map_i2t"], "map_t2i": ev["map_t2i"], "map_avg": ev["map_avg"]}
    return callback


@dataclass
class ExperimentResult:
    state: TrainState
    history: list[dict]
    dataset: MultimodalDataset
    final: dict

    @property
    def best_epoch(self) -> dict | None:
        tracked = [h for h in self.history if "map_avg" in h]
        return max(tracked, key=lambda h: h["map_avg"]) if tracked else None


def run_experiment(config: ExperimentConfig, base: MultimodalDataset | None = None) -> ExperimentResult:
    config.validate()
    dataset = prepare_dataset(config, base)
    callback = map_tracker(dataset, config.eval) if config.eval.track_map else None
    state, history = train(dataset, config.train, on_epoch_end=callback)
    final = evaluate(state.model, dataset, config.eval)
    return ExperimentResult(state, history, dataset, final)


def similarity_dump(model: HashModel, dataset: MultimodalDataset, sample_count: int,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jaccard matrix of clean labels and scaled cross-modal code similarity
    for a seeded random subset. Returns (ids, R, S)."""
    check_compatible(model, dataset)
    if not 1 <= sample_count <= dataset.n:
        raise SpecError(f"sample_count must be in [1, {dataset.n}]")
    ids = np.sort(np.random.default_rng(seed).choice(dataset.n, size=sample_count, replace=False))
    h1 = encode(model, "image", dataset.image_features[ids])
    h2 = encode(model, "text", dataset.text_features[ids])
    R = jaccard_matrix(dataset.clean_labels[ids])
    S = similarity_matrix(h1, h2).data
    return ids, R, S


def off_diagonal_pearson(R: np.ndarray, S: np.ndarray) -> float:
    off = ~np.eye(R.shape[0], dtype=bool)
    return float(np.corrcoef(R[off], S[off])[0, 1])


DESK_LEARNING_RATE = 3e-4


def desk_scale_config(seed: int = 0, noise_rate: float = 0.5, code_length: int = 16,
                      epochs: int = 30, **train_overrides) -> ExperimentConfig:
    """Default synthetic setup with a learning rate sized for ~7 steps/epoch.

    Every other hyperparameter keeps its default.
    """
    base = ExperimentConfig().with_seed(seed)
    return replace(
        base,
        noise=replace(base.noise, rate=noise_rate),
        train=replace(base.train, code_length=code_length, epochs=epochs,
                      learning_rate=DESK_LEARNING_RATE, **train_overrides),
    )
