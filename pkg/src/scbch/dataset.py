"""Synthetic multimodal data, feature-file I/O, label noise and splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, SpecError

TRAIN, QUERY, RETRIEVAL = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", QUERY: "query", RETRIEVAL: "retrieval"}

BINARY_MAGIC = b"SCBH"
_BINARY_HEADER = struct.Struct("<4sIIHH")  # magic, n, C, D1, D2 -> 16 bytes


@dataclass
class MultimodalDataset:
    image_features: np.ndarray
    text_features: np.ndarray
    clean_labels: np.ndarray
    noisy_labels: np.ndarray | None = None
    noise_mask: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.float64)
        n = self.clean_labels.shape[0]
        if self.image_features.shape[0] != n or self.text_features.shape[0] != n:
            raise SpecError("feature and label matrices disagree on sample count")
        if not np.isin(self.clean_labels, (0.0, 1.0)).all():
            raise SpecError("labels must be 0/1")
        if n and (self.clean_labels.sum(axis=1) < 1).any():
            raise SpecError("every sample needs at least one active label")

    @property
    def n(self) -> int:
        return self.clean_labels.shape[0]

    @property
    def num_classes(self) -> int:
        return self.clean_labels.shape[1]

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text_features.shape[1]

    @property
    def training_labels(self) -> np.ndarray:
        """Labels the trainer sees: noisy if noise was injected, else clean."""
        return self.clean_labels if self.noisy_labels is None else self.noisy_labels

    def indices(self, which: int) -> np.ndarray:
        if self.split is None:
            if which == TRAIN:
                return np.arange(self.n)
            raise SpecError("dataset has not been split")
        return np.flatnonzero(self.split == which)

    def summary(self) -> dict:
        card = self.clean_labels.sum(axis=1).astype(int)
        hist = np.bincount(card, minlength=self.num_classes + 1)
        return {
            "n": self.n,
            "num_classes": self.num_classes,
            "image_dim": self.image_dim,
            "text_dim": self.text_dim,
            "label_cardinality_histogram": {int(k): int(v) for k, v in enumerate(hist) if v},
            "class_counts": self.clean_labels.sum(axis=0).astype(int).tolist(),
        }


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    num_classes: int = 10
    image_dim: int = 64
    text_dim: int = 32
    min_labels: int = 1
    max_labels: int = 3
    separation: float = 1.0
    noise_std: float = 1.0
    correlation: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        for name in ("n", "num_classes", "image_dim", "text_dim"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.min_labels < 1 or self.max_labels < self.min_labels:
            raise SpecError("need 1 <= min_labels <= max_labels")
        if self.max_labels > self.num_classes:
            raise SpecError(f"max_labels={self.max_labels} exceeds num_classes={self.num_classes}")
        if not 0.0 <= self.correlation <= 1.0:
            raise SpecError("correlation must lie in [0, 1]")
        if self.noise_std < 0 or self.separation < 0:
            raise SpecError("separation and noise_std must be nonnegative")


@dataclass(frozen=True)
class NoiseSpec:
    rate: float = 0.0
    seed: int = 0
    scheme: str = "symmetric-instance"

    def validate(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise SpecError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.scheme != "symmetric-instance":
            raise SpecError(f"unknown noise scheme {self.scheme!r}")


def generate_synthetic(spec: SyntheticSpec) -> MultimodalDataset:
    """Additive class-prototype features for both modalities.

    Samples sharing some classes share part of their signal, so partial label
    overlap shows up as intermediate feature similarity.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, C = spec.n, spec.num_classes

    labels = np.zeros((n, C))
    counts = rng.integers(spec.min_labels, spec.max_labels + 1, size=n)
    for i, k in enumerate(counts):
        labels[i, rng.choice(C, size=k, replace=False)] = 1.0

    proto_img = rng.normal(0.0, spec.separation, size=(C, spec.image_dim))
    proto_txt = rng.normal(0.0, spec.separation, size=(C, spec.text_dim))

    image = labels @ proto_img + spec.noise_std * rng.normal(size=(n, spec.image_dim))

    signal = labels @ proto_txt
    decoy = rng.normal(size=(n, spec.text_dim)) * (spec.separation * np.sqrt(counts))[:, None]
    text = (spec.correlation * signal + (1.0 - spec.correlation) * decoy
            + spec.noise_std * rng.normal(size=(n, spec.text_dim)))
    return MultimodalDataset(image, text, labels)


def _corrupt_row(row: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    C = row.size
    active = np.flatnonzero(row)
    if active.size == C:
        raise SpecError("cannot corrupt a row with every class active")
    for _ in range(100):
        chosen: list[int] = []
        for a in active:
            options = [c for c in range(C) if c != a and c not in chosen]
            chosen.append(int(rng.choice(options)))
        out = np.zeros(C)
        out[chosen] = 1.0
        if not np.array_equal(out, row):
            return out
    raise SpecError("failed to draw a corrupted label set")  # pragma: no cover


def inject_noise(labels: np.ndarray, spec: NoiseSpec,
                 eligible: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Instance-level symmetric noise.

    Exactly ``round(rate * len(eligible))`` eligible rows are picked; in each,
    every active class is swapped for a different class chosen uniformly,
    with no duplicates, so row cardinality is kept.
    """
    spec.validate()
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    eligible = np.arange(n) if eligible is None else np.asarray(eligible, dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    count = int(np.floor(spec.rate * eligible.size + 0.5))
    picked = np.sort(rng.choice(eligible, size=count, replace=False)) if count else np.array([], dtype=np.int64)

    noisy = labels.copy()
    mask = np.zeros(n, dtype=bool)
    for i in picked:
        noisy[i] = _corrupt_row(labels[i], rng)
        mask[i] = True
    return noisy, mask


def split(dataset: MultimodalDataset, query_fraction: float, retrieval_fraction: float,
          seed: int) -> MultimodalDataset:
    """Disjoint query / retrieval / train assignment; leftovers go to train."""
    if query_fraction <= 0 or retrieval_fraction <= 0:
        raise SpecError("split fractions must be positive")
    if query_fraction + retrieval_fraction > 1.0 + 1e-12:
        raise SpecError("query and retrieval fractions sum to more than 1")
    n = dataset.n
    n_query = int(np.floor(query_fraction * n + 0.5))
    n_retr = min(int(np.floor(retrieval_fraction * n + 0.5)), n - n_query)
    order = np.random.default_rng(seed).permutation(n)
    assign = np.full(n, TRAIN, dtype=np.int8)
    assign[order[:n_query]] = QUERY
    assign[order[n_query:n_query + n_retr]] = RETRIEVAL
    return replace(dataset, split=assign, noisy_labels=None, noise_mask=None)


def apply_noise(dataset: MultimodalDataset, spec: NoiseSpec) -> MultimodalDataset:
    """Corrupt training rows only; clean labels are kept alongside."""
    noisy, mask = inject_noise(dataset.clean_labels, spec, eligible=dataset.indices(TRAIN))
    return replace(dataset, noisy_labels=noisy, noise_mask=mask)


# -- feature files --------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_features(dataset: MultimodalDataset, path, fmt: str = "text") -> None:
    path = Path(path)
    if fmt == "text":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"{dataset.n} {dataset.num_classes} {dataset.image_dim} {dataset.text_dim}\n")
            for y, a, b in zip(dataset.clean_labels, dataset.image_features, dataset.text_features):
                bits = " ".join(str(int(v)) for v in y)
                fh.write(f"{bits} | {_fmt(a)} | {_fmt(b)}\n")
    elif fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_BINARY_HEADER.pack(BINARY_MAGIC, dataset.n, dataset.num_classes,
                                         dataset.image_dim, dataset.text_dim))
            for block in (dataset.clean_labels, dataset.image_features, dataset.text_features):
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    else:
        raise SpecError(f"unknown feature format {fmt!r}")


def detect_format(path) -> str:
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == BINARY_MAGIC else "text"


def load_features(path, fmt: str = "auto") -> MultimodalDataset:
    path = Path(path)
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "text":
        return _load_text(path)
    if fmt == "binary":
        return _load_binary(path)
    raise SpecError(f"unknown feature format {fmt!r}")


def _parse_floats(tokens: list[str], expected: int, line: int, name: str) -> np.ndarray:
    if len(tokens) != expected:
        raise ParseError(f"expected {expected} values, got {len(tokens)}", line, name)
    try:
        out = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise ParseError(f"not a number ({exc})", line, name) from None
    if not np.all(np.isfinite(out)):
        raise ParseError("non-finite value", line, name)
    return out


def _load_text(path: Path) -> MultimodalDataset:
    with open(path, encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1, "header")
    head = lines[0].split()
    if len(head) != 4:
        raise ParseError("header must be 'n C D1 D2'", 1, "header")
    try:
        n, C, d1, d2 = (int(t) for t in head)
    except ValueError:
        raise ParseError("header values must be integers", 1, "header") from None
    if min(n, C, d1, d2) < 1:
        raise ParseError("header values must be positive", 1, "header")

    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ParseError(f"header declares {n} rows but file has {len(body)}", len(lines), "rows")

    labels = np.empty((n, C))
    image = np.empty((n, d1))
    text = np.empty((n, d2))
    for i, raw in enumerate(body):
        lineno = i + 2
        parts = raw.split("|")
        if len(parts) != 3:
            raise ParseError(f"expected 3 '|'-separated fields, got {len(parts)}", lineno, "row")
        bits = parts[0].split()
        if len(bits) != C or any(b not in ("0", "1") for b in bits):
            raise ParseError(f"expected {C} label bits in {{0,1}}", lineno, "labels")
        labels[i] = [int(b) for b in bits]
        if labels[i].sum() < 1:
            raise ParseError("row has no active label", lineno, "labels")
        image[i] = _parse_floats(parts[1].split(), d1, lineno, "image")
        text[i] = _parse_floats(parts[2].split(), d2, lineno, "text")
    return MultimodalDataset(image, text, labels)


def _load_binary(path: Path) -> MultimodalDataset:
    raw = path.read_bytes()
    if len(raw) < _BINARY_HEADER.size:
        raise ParseError("file shorter than the 16-byte header", 1, "header")
    magic, n, C, d1, d2 = _BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ParseError("bad magic", 1, "header")
    expected = _BINARY_HEADER.size + 8 * n * (C + d1 + d2)
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes for n={n}, got {len(raw)}", None, "rows")
    flat = np.frombuffer(raw, dtype="<f8", offset=_BINARY_HEADER.size).astype(np.float64)
    labels = flat[: n * C].reshape(n, C)
    image = flat[n * C : n * (C + d1)].reshape(n, d1)
    text = flat[n * (C + d1):].reshape(n, d2)
    bad = ~np.isin(labels, (0.0, 1.0))
    if bad.any():
        raise ParseError("label values must be 0 or 1", int(np.argwhere(bad)[0, 0]) + 1, "labels")
    empty = labels.sum(axis=1) < 1
    if empty.any():
        raise ParseError("row has no active label", int(np.flatnonzero(empty)[0]) + 1, "labels")
    return MultimodalDataset(image.copy(), text.copy(), labels.copy())
