"""Objective terms: neighbour-consensus weighting, weighted classification,
and the attraction / repulsion / quantization hashing terms.

Label-side quantities (Jaccard matrix, soft labels, confidence weights) are
plain numpy and never differentiated. Terms that depend on network outputs
take and return :class:`~scbch.ndmath.Matrix` so they can sit on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .errors import ShapeError

COS_EPS = 1e-12
SIM_FLOOR = 1e-8


# -- label similarity --------------------------------------------------------

def jaccard(y_i, y_j) -> float:
    """Intersection over union of two multi-hot vectors (0 if both empty)."""
    a = np.asarray(y_i, dtype=np.float64).ravel()
    b = np.asarray(y_j, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"label vectors differ in length: {a.size} vs {b.size}")
    inter = float(a @ b)
    union = float(a.sum() + b.sum() - inter)
    return inter / union if union > 0 else 0.0


def jaccard_matrix(labels: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """All-pairs Jaccard similarity between rows of ``labels`` and ``other``."""
    a = np.asarray(labels, dtype=np.float64)
    b = a if other is None else np.asarray(other, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"label widths differ: {a.shape[1]} vs {b.shape[1]}")
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def positive_mask(R: np.ndarray) -> np.ndarray:
    """Binary mask of pairs sharing at least one label, diagonal zeroed."""
    M = (np.asarray(R) > 0).astype(np.float64)
    np.fill_diagonal(M, 0.0)
    return M


def pair_category(y_i, y_j, strategy: str = "bidirectional") -> str:
    """Classify a label pair as ``positive``, ``negative`` or ``soft``.

    ``all`` and ``any`` are the two binary conventions; ``bidirectional``
    keeps partial overlaps as their own category.
    """
    r = jaccard(y_i, y_j)
    if strategy == "all":
        return "positive" if r == 1.0 else "negative"
    if strategy == "any":
        return "positive" if r > 0 else "negative"
    if strategy == "bidirectional":
        if r == 1.0:
            return "positive"
        return "soft" if r > 0 else "negative"
    raise ValueError(f"unknown pairing strategy {strategy!r}")


def pair_roles(r: float) -> tuple[bool, float]:
    """(contributes to attraction, repulsion weight) for a pair with Jaccard ``r``."""
    return r > 0, 1.0 - r


# -- neighbour consensus ------------------------------------------------------

@dataclass
class NeighborSet:
    """Top-K neighbours per anchor and their per-modality cosine similarities.

    ``indices`` has shape (n, K); ``similarities`` has shape (2, n, K), one
    slab per modality.
    """

    indices: np.ndarray
    similarities: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.similarities = np.asarray(self.similarities, dtype=np.float64)
        n, k = self.indices.shape
        if k < 1:
            raise ShapeError("need at least one neighbour")
        if self.similarities.shape != (2, n, k):
            raise ShapeError(f"similarities must have shape (2, {n}, {k}), got {self.similarities.shape}")
        if np.any(self.indices == np.arange(n)[:, None]):
            raise ShapeError("an anchor cannot be its own neighbour")

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _neighbor_coefficients(sims: np.ndarray) -> np.ndarray:
    """Average over modalities of per-modality normalised similarities, (n, K)."""
    k = sims.shape[-1]
    coef = np.zeros(sims.shape[1:])
    for s in sims:
        denom = s.sum(axis=1, keepdims=True)
        ok = denom > SIM_FLOOR
        coef += np.where(ok, s / np.where(ok, denom, 1.0), 1.0 / k)
    return 0.5 * coef


def neighbor_soft_labels(neighbors: NeighborSet, labels: np.ndarray) -> np.ndarray:
    """Soft label for every anchor, shape (n, C)."""
    labels = np.asarray(labels, dtype=np.float64)
    coef = _neighbor_coefficients(neighbors.similarities)
    return np.einsum("nk,nkc->nc", coef, labels[neighbors.indices])


def neighbor_soft_label(i: int, neighbors: NeighborSet, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    coef = _neighbor_coefficients(neighbors.similarities[:, i : i + 1, :])[0]
    return coef @ labels[neighbors.indices[i]]


def confidence_weights(labels: np.ndarray, soft: np.ndarray, gamma: float) -> np.ndarray:
    """Per-sample weight ``gamma + (1 - gamma) * cos(y_i, p_i)``.

    Zero vectors count as cosine 0; the cosine is clipped to [0, 1] so the
    weight stays in [gamma, 1] even if a soft label picks up negative mass.
    """
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    p = np.atleast_2d(np.asarray(soft, dtype=np.float64))
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} and soft labels {p.shape} differ")
    ny = np.linalg.norm(y, axis=1)
    np_ = np.linalg.norm(p, axis=1)
    cos = np.einsum("nc,nc->n", y, p) / (ny * np_ + COS_EPS)
    cos = np.where((ny == 0) | (np_ == 0), 0.0, np.clip(cos, 0.0, 1.0))
    return gamma + (1.0 - gamma) * cos


def confidence_weight(y_i, p_i, gamma: float) -> float:
    return float(confidence_weights(y_i, p_i, gamma)[0])


# -- classification -------------------------------------------------------------

def cscc_loss(z1, z2, labels: np.ndarray, weights: np.ndarray) -> nd.Matrix:
    """Sample-weighted binary cross-entropy over both modalities' predictions,
    averaged over the 2*n*C terms."""
    z1, z2 = nd.as_matrix(z1), nd.as_matrix(z2)
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if z1.shape != y.shape or z2.shape != y.shape:
        raise ShapeError(f"predictions {z1.shape}/{z2.shape} vs labels {y.shape}")
    if w.shape[0] != y.shape[0]:
        raise ShapeError(f"{w.shape[0]} weights for {y.shape[0]} samples")
    n, c = y.shape
    Y, notY, W = nd.Matrix(y), nd.Matrix(1.0 - y), nd.Matrix(w)
    acc = None
    for z in (z1, z2):
        zc = nd.clamp(z)
        ll = nd.add(nd.mul(Y, nd.log(zc)), nd.mul(notY, nd.log(nd.sub(1.0, zc))))
        term = nd.total(nd.mul(W, ll))
        acc = term if acc is None else nd.add(acc, term)
    return nd.scale(acc, -1.0 / (2.0 * n * c))


# -- cross-modal similarity terms ------------------------------------------------

def similarity_matrix(h1, h2, scaling: str = "mean") -> nd.Matrix:
    """Cross-modal inner products ``S_ij = <h1_i, h2_j>``, divided by the code
    length under ``mean`` scaling."""
    h1, h2 = nd.as_matrix(h1), nd.as_matrix(h2)
    if h1.cols != h2.cols:
        raise ShapeError(f"code lengths differ: {h1.cols} vs {h2.cols}")
    S = nd.matmul(h1, nd.transpose(h2))
    if scaling == "mean":
        return nd.scale(S, 1.0 / h1.cols)
    if scaling == "raw":
        return S
    raise ValueError(f"unknown similarity scaling {scaling!r}")


def _square(S: nd.Matrix) -> int:
    if S.rows != S.cols:
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    return S.rows


def _diagonal(S: nd.Matrix) -> nd.Matrix:
    return nd.row_sum(nd.mul(S, np.eye(S.rows)))


def _off_diagonal(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def attraction_loss(S, M: np.ndarray, xi: float) -> nd.Matrix:
    S = nd.as_matrix(S)
    n = _square(S)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (n, n):
        raise ShapeError(f"mask shape {M.shape} does not match {S.shape}")
    pull = nd.total(nd.mul(nd.exp(nd.sub(xi, S)), M * _off_diagonal(n)))
    align = nd.total(_diagonal(S))
    return nd.sub(nd.scale(pull, 1.0 / n**2), nd.scale(align, 1.0 / n))


def hard_negative_adjust(S_d, S_ii, xi: float, margin: float):
    """``S_d - xi * max(0, (S_ii - margin) - S_d)``.

    Works on floats or on matrices (``S_ii`` may be a column to broadcast).
    """
    if isinstance(S_d, nd.Matrix) or isinstance(S_ii, nd.Matrix):
        gap = nd.sub(nd.sub(S_ii, margin), S_d)
        return nd.sub(S_d, nd.scale(nd.relu(gap), xi))
    return S_d - xi * max(0.0, (S_ii - margin) - S_d)


def repulsion_loss(S, R: np.ndarray, xi: float, margin: float) -> nd.Matrix:
    S = nd.as_matrix(S)
    n = _square(S)
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (n, n):
        raise ShapeError(f"Jaccard matrix shape {R.shape} does not match {S.shape}")
    diag = _diagonal(S)
    dissim = 1.0 - R
    off = _off_diagonal(n)
    acc = None
    for S_d in (S, nd.transpose(S)):
        N = hard_negative_adjust(S_d, diag, xi, margin)
        term = nd.total(nd.mul(nd.exp(nd.mul(N, dissim)), off))
        acc = term if acc is None else nd.add(acc, term)
    return nd.scale(acc, 1.0 / (2.0 * n**2))


def quantization_loss(h1, h2, beta: float) -> nd.Matrix:
    """``beta/(n L) * sum over both modalities of (1 - |h|)``."""
    h1, h2 = nd.as_matrix(h1), nd.as_matrix(h2)
    if h1.shape != h2.shape:
        raise ShapeError(f"code shapes differ: {h1.shape} vs {h2.shape}")
    n, L = h1.shape
    gap = nd.add(nd.total(nd.sub(1.0, nd.absolute(h1))), nd.total(nd.sub(1.0, nd.absolute(h2))))
    return nd.scale(gap, beta / (n * L))


@dataclass
class BSCHTerms:
    attraction: nd.Matrix
    repulsion: nd.Matrix
    quantization: nd.Matrix
    S: nd.Matrix
    R: np.ndarray

    @property
    def total(self) -> nd.Matrix:
        return nd.add(nd.add(self.attraction, self.repulsion), self.quantization)


def bsch_loss(h1, h2, labels: np.ndarray, xi: float, margin: float, beta: float,
              scaling: str = "mean", xi_repulsion: float | None = None) -> BSCHTerms:
    """Attraction, repulsion and quantization terms for one batch."""
    h1, h2 = nd.as_matrix(h1), nd.as_matrix(h2)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[0] != h1.rows or h1.rows != h2.rows:
        raise ShapeError("codes and labels disagree on batch size")
    S = similarity_matrix(h1, h2, scaling)
    R = jaccard_matrix(labels)
    xr = xi if xi_repulsion is None else xi_repulsion
    return BSCHTerms(
        attraction=attraction_loss(S, positive_mask(R), xi),
        repulsion=repulsion_loss(S, R, xr, margin),
        quantization=quantization_loss(h1, h2, beta),
        S=S,
        R=R,
    )


@dataclass
class LossBreakdown:
    l_cscc: float
    l_att: float
    l_rep: float
    l_quant: float
    l_total: float
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_record(self) -> dict:
        return {
            "l_cscc": self.l_cscc,
            "l_att": self.l_att,
            "l_rep": self.l_rep,
            "l_quant": self.l_quant,
            "l_total": self.l_total,
        }
