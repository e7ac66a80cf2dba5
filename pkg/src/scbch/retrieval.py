"""Sign binarization, bit-packed Hamming ranking, MAP and PR curves."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EvaluationError, ShapeError

log = logging.getLogger(__name__)

WORD_BITS = 64
_BIT_WEIGHTS = np.left_shift(np.uint64(1), np.arange(WORD_BITS, dtype=np.uint64))


@dataclass(frozen=True)
class BinaryCodeIndex:
    """Packed sign codes: bit ``l`` of a sample is set iff its code is +1.

    Component ``l`` lives in word ``l // 64`` at bit position ``l % 64``;
    padding bits past ``code_length`` are always zero.
    """

    words: np.ndarray
    code_length: int
    ids: np.ndarray

    @property
    def n(self) -> int:
        return self.words.shape[0]

    @property
    def num_words(self) -> int:
        return self.words.shape[1]

    def row(self, i: int) -> "BinaryCodeIndex":
        return BinaryCodeIndex(self.words[i : i + 1], self.code_length, self.ids[i : i + 1])


def pack_bits(bits: np.ndarray) -> np.ndarray:
    bits = np.atleast_2d(np.asarray(bits, dtype=bool))
    n, L = bits.shape
    n_words = -(-L // WORD_BITS)
    padded = np.zeros((n, n_words * WORD_BITS), dtype=np.uint64)
    padded[:, :L] = bits
    return (padded.reshape(n, n_words, WORD_BITS) * _BIT_WEIGHTS).sum(axis=2, dtype=np.uint64)


def unpack_bits(words: np.ndarray, code_length: int) -> np.ndarray:
    words = np.atleast_2d(np.asarray(words, dtype=np.uint64))
    bits = (words[:, :, None] & _BIT_WEIGHTS) != 0
    return bits.reshape(words.shape[0], -1)[:, :code_length]


def binarize(h, ids=None) -> BinaryCodeIndex:
    """``sign(h)`` with sign(0) = +1, packed into 64-bit words."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if not np.all(np.isfinite(h)):
        raise ValueError("codes must be finite")
    ids = np.arange(h.shape[0]) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (h.shape[0],):
        raise ShapeError(f"{ids.size} ids for {h.shape[0]} codes")
    return BinaryCodeIndex(pack_bits(h >= 0), h.shape[1], ids)


def sign_codes(index: BinaryCodeIndex) -> np.ndarray:
    """The +/-1 code matrix represented by ``index``."""
    return np.where(unpack_bits(index.words, index.code_length), 1.0, -1.0)


def hamming_distances(queries: BinaryCodeIndex, index: BinaryCodeIndex) -> np.ndarray:
    """Popcount distances, shape (num_queries, index.n)."""
    if queries.code_length != index.code_length:
        raise ShapeError(f"code length {queries.code_length} vs index {index.code_length}")
    out = np.zeros((queries.n, index.n), dtype=np.int64)
    for w in range(index.num_words):
        x = queries.words[:, w, None] ^ index.words[None, :, w]
        out += np.bitwise_count(x).astype(np.int64)
    return out


@dataclass(frozen=True)
class RankedList:
    ids: np.ndarray
    distances: np.ndarray


def _rank(distances: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Per-row order by ascending distance, then ascending id."""
    tie = np.broadcast_to(ids, distances.shape)
    return np.lexsort((tie, distances), axis=-1)


def hamming_rank(query, index: BinaryCodeIndex) -> RankedList:
    """Rank every indexed item for a single query code.

    ``query`` is a one-row :class:`BinaryCodeIndex` or a packed word vector.
    """
    if not isinstance(query, BinaryCodeIndex):
        words = np.atleast_2d(np.asarray(query, dtype=np.uint64))
        if words.shape != (1, index.num_words):
            raise ShapeError(f"query has {words.shape[-1]} words, index has {index.num_words}")
        query = BinaryCodeIndex(words, index.code_length, np.zeros(1, dtype=np.int64))
    if query.n != 1:
        raise ShapeError("hamming_rank takes a single query")
    dist = hamming_distances(query, index)[0]
    order = _rank(dist[None, :], index.ids)[0]
    return RankedList(index.ids[order], dist[order])


def relevance_matrix(query_labels: np.ndarray, retrieval_labels: np.ndarray) -> np.ndarray:
    """True where a query and an item share at least one class."""
    return (np.asarray(query_labels) @ np.asarray(retrieval_labels).T) > 0


def average_precision(relevance, cutoff: int | None = None) -> float:
    """Mean of precision@k over the relevant ranks ``k``.

    With ``cutoff`` only the top ``cutoff`` ranks count, normalised by the
    number of relevant items found there. No relevant item gives 0.
    """
    rel = np.asarray(relevance, dtype=bool).ravel()
    if cutoff is not None:
        rel = rel[:cutoff]
    hits = rel.sum()
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float(precision[rel].sum() / hits)


@dataclass
class RetrievalRun:
    """Ranked lists for one direction; ``relevance`` is in rank order."""

    direction: str
    ranked_ids: np.ndarray
    distances: np.ndarray
    relevance: np.ndarray
    code_length: int

    @property
    def num_queries(self) -> int:
        return self.ranked_ids.shape[0]


def run_retrieval(direction: str, queries: BinaryCodeIndex, index: BinaryCodeIndex,
                  query_labels: np.ndarray, retrieval_labels: np.ndarray,
                  chunk: int = 256) -> RetrievalRun:
    """Rank the whole index for every query. Labels are looked up by position."""
    if queries.n == 0:
        raise EvaluationError("empty query set")
    rel_full = relevance_matrix(query_labels, retrieval_labels)
    ranked, dists, rels = [], [], []
    for start in range(0, queries.n, chunk):
        stop = min(start + chunk, queries.n)
        block = BinaryCodeIndex(queries.words[start:stop], queries.code_length, queries.ids[start:stop])
        dist = hamming_distances(block, index)
        order = _rank(dist, index.ids)
        ranked.append(index.ids[order])
        dists.append(np.take_along_axis(dist, order, axis=1))
        rels.append(np.take_along_axis(rel_full[start:stop], order, axis=1))
    return RetrievalRun(direction, np.vstack(ranked), np.vstack(dists), np.vstack(rels), index.code_length)


@dataclass(frozen=True)
class MAPResult:
    direction: str
    map: float
    num_queries: int
    zero_relevant: int


def _ap_rows(relevance: np.ndarray, cutoff: int | None) -> np.ndarray:
    rel = relevance if cutoff is None else relevance[:, :cutoff]
    rel = rel.astype(np.float64)
    hits = rel.sum(axis=1)
    precision = np.cumsum(rel, axis=1) / np.arange(1, rel.shape[1] + 1)
    num = (precision * rel).sum(axis=1)
    return np.divide(num, hits, out=np.zeros_like(num), where=hits > 0)


def mean_average_precision(run: RetrievalRun, cutoff: int | None = None) -> MAPResult:
    if run.num_queries == 0:
        raise EvaluationError("empty query set")
    ap = _ap_rows(run.relevance, cutoff)
    zero = int((run.relevance.sum(axis=1) == 0).sum())
    if zero:
        log.warning("%s: %d queries have no relevant item (AP=0)", run.direction, zero)
    return MAPResult(run.direction, float(ap.mean()), run.num_queries, zero)


def shuffled_ranking_map(relevance: np.ndarray, seed: int = 0, repeats: int = 10) -> float:
    """MAP of uniformly random rankings: the label-prior baseline."""
    relevance = np.asarray(relevance, dtype=bool)
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(repeats):
        perm = rng.permuted(np.broadcast_to(np.arange(relevance.shape[1]), relevance.shape), axis=1)
        scores.append(_ap_rows(np.take_along_axis(relevance, perm, axis=1), None).mean())
    return float(np.mean(scores))


def precision_recall_curve(run: RetrievalRun, mode: str = "rank") -> list[tuple[int, float, float]]:
    """Query-averaged (cutoff, recall, precision) points.

    ``rank`` mode uses every rank cutoff 1..N; ``radius`` mode uses Hamming
    radii 0..L, where a query retrieving nothing counts precision 0.
    """
    if run.num_queries == 0:
        raise EvaluationError("empty query set")
    rel = run.relevance.astype(np.float64)
    total_rel = rel.sum(axis=1, keepdims=True)
    safe_total = np.where(total_rel > 0, total_rel, 1.0)
    if mode == "rank":
        hits = np.cumsum(rel, axis=1)
        precision = (hits / np.arange(1, rel.shape[1] + 1)).mean(axis=0)
        recall = (hits / safe_total).mean(axis=0)
        return [(k + 1, float(r), float(p)) for k, (r, p) in enumerate(zip(recall, precision))]
    if mode == "radius":
        points = []
        for radius in range(run.code_length + 1):
            within = run.distances <= radius
            got = within.sum(axis=1)
            hit = (rel * within).sum(axis=1)
            precision = np.divide(hit, got, out=np.zeros_like(hit), where=got > 0)
            recall = hit / safe_total[:, 0]
            points.append((radius, float(recall.mean()), float(precision.mean())))
        return points
    raise ValueError(f"unknown PR mode {mode!r}")


def trapezoid_area(points: list[tuple[int, float, float]]) -> float:
    recall = np.array([p[1] for p in points])
    precision = np.array([p[2] for p in points])
    return float(np.trapezoid(precision, recall))


def write_pr_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "recall", "precision"])
        for cutoff, recall, precision in points:
            writer.writerow([cutoff, repr(recall), repr(precision)])


def write_report(records: list[dict], path) -> None:
    """One JSON object per line, one line per metric record."""
    with open(Path(path), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
