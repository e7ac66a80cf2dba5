"""Mini-batch training with Adam, warm-up weighting schedule and metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import losses
from . import ndmath as nd
from .dataset import TRAIN, MultimodalDataset
from .errors import NumericalError, SpecError
from .model import HashModel, ModelConfig, classify, forward, init_parameters

log = logging.getLogger(__name__)

ABLATIONS = ("cscc", "bsch", "weighting", "attraction")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    warmup_epochs: int = 10
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 0.5
    xi: float = 1.0
    xi_repulsion: float | None = None
    margin: float = 0.2
    neighbors: int = 8
    code_length: int = 16
    hidden_dim: int = 256
    similarity_scaling: str = "mean"
    neighbor_space: str = "codes"
    seed: int = 0
    disable_cscc: bool = False
    disable_bsch: bool = False
    disable_weighting: bool = False
    disable_attraction: bool = False
    debug: bool = False

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise SpecError("epoch counts must be nonnegative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise SpecError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")
        if self.batch_size < 2:
            raise SpecError("batch_size must be >= 2 for pairwise terms")
        if self.neighbors < 1:
            raise SpecError("neighbors must be >= 1")
        for name in ("learning_rate", "alpha", "beta", "gamma", "xi", "margin"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be nonnegative")
        if self.xi_repulsion is not None and self.xi_repulsion < 0:
            raise SpecError("xi_repulsion must be nonnegative")
        if not 0.0 <= self.gamma <= 1.0:
            raise SpecError("gamma must lie in [0, 1]")
        if self.disable_cscc and self.disable_bsch:
            raise SpecError("disabling both cscc and bsch leaves an empty objective")
        if self.similarity_scaling not in ("mean", "raw"):
            raise SpecError(f"unknown similarity_scaling {self.similarity_scaling!r}")
        if self.neighbor_space not in ("codes", "raw"):
            raise SpecError(f"unknown neighbor_space {self.neighbor_space!r}")

    def with_ablations(self, names) -> "TrainConfig":
        updates = {}
        for name in names:
            if name not in ABLATIONS:
                raise SpecError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
            updates[f"disable_{name}"] = True
        return TrainConfig(**{**asdict(self), **updates})

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class Adam:
    """Bias-corrected Adam over a dict of parameter blocks."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


@dataclass
class TrainState:
    model: HashModel
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    weight_history: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def timestep(self) -> int:
        return self.optimizer.t


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> TrainState:
    """One Adam update of ``state.model`` in place; returns ``state``."""
    opt, params = state.optimizer, state.model.params
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise SpecError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1**opt.t
    bc2 = 1.0 - opt.beta2**opt.t
    for name in params:
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return state


def new_state(config: TrainConfig, model_config: ModelConfig) -> TrainState:
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = init_parameters(model_config, int(init_seq.generate_state(1)[0]))
    return TrainState(model=model, optimizer=Adam(model.params), rng=np.random.default_rng(shuffle_seq))


def _cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return (x @ x.T) / (norms * norms.T + losses.COS_EPS)


def select_batch_neighbors(h1: np.ndarray, h2: np.ndarray, k: int) -> losses.NeighborSet:
    """Top-``k`` neighbours by mean of the two within-modality cosines.

    Ties go to the lower batch index.
    """
    h1, h2 = np.asarray(h1, dtype=np.float64), np.asarray(h2, dtype=np.float64)
    n = h1.shape[0]
    if n < 2:
        raise SpecError("need at least two samples to pick neighbours")
    if k > n - 1:
        log.warning("neighbour count %d clamped to batch size - 1 = %d", k, n - 1)
        k = n - 1
    c1, c2 = _cosine_matrix(h1), _cosine_matrix(h2)
    score = 0.5 * (c1 + c2)
    np.fill_diagonal(score, -np.inf)
    order = np.argsort(-score, axis=1, kind="stable")[:, :k]
    sims = np.stack([np.take_along_axis(c1, order, 1), np.take_along_axis(c2, order, 1)])
    return losses.NeighborSet(order, sims)


@dataclass
class Batch:
    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    ids: np.ndarray


@dataclass
class ObjectiveResult:
    loss: nd.Matrix
    breakdown: losses.LossBreakdown
    raw_weights: np.ndarray


def weighting_active(config: TrainConfig, epoch: int) -> bool:
    return not config.disable_weighting and epoch > config.warmup_epochs


def objective(batch: Batch, model: HashModel, config: TrainConfig, epoch: int,
              tape: nd.Tape | None = None, weights: np.ndarray | None = None) -> ObjectiveResult:
    """Batch loss. Epoch numbering starts at 1; weights switch on after warm-up.

    Confidence weights are constants (no gradient flows through the neighbour
    search). ``weights`` pins them explicitly, which finite-difference checks
    need. Without a tape the result is a plain value.
    """
    bound = model.bind(tape) if tape is not None else None
    h1 = forward(model, "image", batch.image, bound)
    h2 = forward(model, "text", batch.text, bound)
    n = h1.rows

    if config.neighbor_space == "codes":
        nbrs = select_batch_neighbors(h1.data, h2.data, config.neighbors)
    else:
        nbrs = select_batch_neighbors(batch.image, batch.text, config.neighbors)
    soft = losses.neighbor_soft_labels(nbrs, batch.labels)
    raw_w = losses.confidence_weights(batch.labels, soft, config.gamma)
    if weights is not None:
        raw_w = np.asarray(weights, dtype=np.float64)
    w = raw_w if weighting_active(config, epoch) else np.ones(n)

    zero = nd.Matrix(0.0)
    l_cls = zero
    if not config.disable_cscc:
        z1 = classify(model, "image", h1, bound)
        z2 = classify(model, "text", h2, bound)
        l_cls = losses.cscc_loss(z1, z2, batch.labels, w)

    l_att = l_rep = l_quant = zero
    if not config.disable_bsch:
        terms = losses.bsch_loss(h1, h2, batch.labels, config.xi, config.margin, config.beta,
                                 scaling=config.similarity_scaling, xi_repulsion=config.xi_repulsion)
        l_rep, l_quant = terms.repulsion, terms.quantization
        if not config.disable_attraction:
            l_att = terms.attraction
    l_hash = nd.add(nd.add(l_att, l_rep), l_quant)
    total = nd.add(l_cls, nd.scale(l_hash, config.alpha))

    breakdown = losses.LossBreakdown(
        l_cscc=l_cls.item(), l_att=l_att.item(), l_rep=l_rep.item(),
        l_quant=l_quant.item(), l_total=total.item(), weights=w,
    )
    return ObjectiveResult(total, breakdown, raw_w)


def iterate_batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = ids[rng.permutation(ids.size)]
    for start in range(0, order.size, batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size >= 2:
            yield chunk


def make_batch(dataset: MultimodalDataset, ids: np.ndarray) -> Batch:
    return Batch(dataset.image_features[ids], dataset.text_features[ids],
                 dataset.training_labels[ids], ids)


def _mean_or_none(values: np.ndarray) -> float | None:
    return float(values.mean()) if values.size else None


def train_epoch(state: TrainState, dataset: MultimodalDataset, config: TrainConfig) -> dict:
    """Run one epoch and return its metrics record."""
    state.epoch += 1
    epoch = state.epoch
    started = time.perf_counter()
    train_ids = dataset.indices(TRAIN)
    sums = dict.fromkeys(("l_cscc", "l_att", "l_rep", "l_quant", "l_total"), 0.0)
    n_batches = 0
    weights = np.full(dataset.n, np.nan)

    for ids in iterate_batches(train_ids, config.batch_size, state.rng):
        tape = nd.Tape()
        res = objective(make_batch(dataset, ids), state.model, config, epoch, tape)
        grads = tape.backward(res.loss)
        adam_step(state, grads, config.learning_rate)
        if config.debug:
            for name, p in state.model.params.items():
                if not np.all(np.isfinite(p)):
                    raise NumericalError(f"parameter block {name} became non-finite at step {state.timestep}")
        for key, value in res.breakdown.as_record().items():
            sums[key] += value
        weights[ids] = res.breakdown.weights
        n_batches += 1

    record = {"epoch": epoch}
    record.update({k: (v / n_batches if n_batches else 0.0) for k, v in sums.items()})
    seen = ~np.isnan(weights)
    if dataset.noise_mask is not None:
        record["mean_weight_clean"] = _mean_or_none(weights[seen & ~dataset.noise_mask])
        record["mean_weight_noisy"] = _mean_or_none(weights[seen & dataset.noise_mask])
    else:
        record["mean_weight_clean"] = None
        record["mean_weight_noisy"] = None
    record["wall_time_ms"] = (time.perf_counter() - started) * 1000.0
    state.weight_history[epoch] = weights
    state.history.append(record)
    return record


EpochCallback = Callable[[TrainState, dict], "dict | None"]


def train(dataset: MultimodalDataset, config: TrainConfig,
          on_epoch_end: EpochCallback | None = None,
          state: TrainState | None = None) -> tuple[TrainState, list[dict]]:
    """Train for ``config.epochs`` epochs.

    ``on_epoch_end(state, record)`` may return extra fields to merge into the
    epoch record (e.g. per-epoch retrieval MAP).
    """
    config.validate()
    if dataset.indices(TRAIN).size < 2:
        raise SpecError("training split needs at least two samples")
    if state is None:
        model_config = ModelConfig.default(dataset.image_dim, dataset.text_dim, dataset.num_classes,
                                           config.code_length, config.hidden_dim)
        state = new_state(config, model_config)
    while state.epoch < config.epochs:
        record = train_epoch(state, dataset, config)
        if on_epoch_end is not None:
            extra = on_epoch_end(state, record)
            if extra:
                record.update(extra)
        log.info("epoch %d: total=%.5f", record["epoch"], record["l_total"])
    return state, state.history
