"""Dominant-prototype machinery: nearest-class graph, per-class queues,
selection, and prediction-driven queue updates.

Each class keeps a fixed-size queue of the classes currently most likely to
generate strong negative gradients against it, seeded from a cosine
nearest-neighbor graph over reference features, plus a larger immutable
candidate set that gates which classes may ever be promoted into the queue.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ShapeError
from .prototypes import dedup_keep_order, random_fill

_MAGIC = b"LBLQ"
_VERSION = 1

CASE_CORRECT = "correct"
CASE_IN_QUEUE = "in_queue"
CASE_PROMOTE = "promote_from_candidates"
CASE_REJECT = "reject_noisy"
CASES = (CASE_CORRECT, CASE_IN_QUEUE, CASE_PROMOTE, CASE_REJECT)


@dataclass
class NearestClassGraph:
    """Per-class list of the K nearest other classes by cosine distance."""

    neighbor_ids: np.ndarray  # (N, K) int64, ascending distance
    distances: np.ndarray  # (N, K) float64

    @property
    def n_classes(self) -> int:
        return self.neighbor_ids.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]


def build_graph(
    reference_features: np.ndarray, k: int, chunk: int = 512
) -> NearestClassGraph:
    """Exact brute-force kNN under cosine distance (1 - dot on unit rows).

    Ties break toward the lower class id. Quadratic scan, computed in row
    chunks; exact at desk scale and pluggable for an approximate backend.
    """
    ref = np.asarray(reference_features, dtype=np.float64)
    if ref.ndim != 2:
        raise ShapeError("reference features must be 2-D")
    n = ref.shape[0]
    if not (1 <= k < n):
        raise InvalidArgument(f"k={k} must satisfy 1 <= k < n={n}")

    neighbor_ids = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k), dtype=np.float64)
    ids = np.arange(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dist = 1.0 - ref[start:stop] @ ref.T
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        for r in range(stop - start):
            order = np.lexsort((ids, dist[r]))[:k]
            neighbor_ids[start + r] = order
            distances[start + r] = dist[r, order]
    return NearestClassGraph(neighbor_ids=neighbor_ids, distances=distances)


class DominantQueues:
    """All per-class queues and candidate sets, arrays-of-rows layout.

    ``queue_ids[i]`` holds class i's queue (capacity q, always full once
    initialized); ``queue_aff[i]`` holds the matching affinity scores used
    for eviction order (higher = more dominant). Candidates are immutable
    after construction; promotions only move classes from C into Q.
    """

    def __init__(
        self,
        queue_ids: np.ndarray,
        queue_aff: np.ndarray,
        cand_ids: np.ndarray,
    ):
        self.queue_ids = np.asarray(queue_ids, dtype=np.int64)
        self.queue_aff = np.asarray(queue_aff, dtype=np.float64)
        self.cand_ids = np.asarray(cand_ids, dtype=np.int64)
        if self.queue_ids.shape != self.queue_aff.shape:
            raise ShapeError("queue ids/affinities shape mismatch")
        if self.queue_ids.shape[0] != self.cand_ids.shape[0]:
            raise ShapeError("queue and candidate class counts differ")
        self._cand_sets = [frozenset(row.tolist()) for row in self.cand_ids]
        self._queue_sets = [set(row.tolist()) for row in self.queue_ids]

    @property
    def n_classes(self) -> int:
        return self.queue_ids.shape[0]

    @property
    def q(self) -> int:
        return self.queue_ids.shape[1]

    @property
    def c(self) -> int:
        return self.cand_ids.shape[1]

    @classmethod
    def from_graph(cls, graph: NearestClassGraph, q: int = 100, c: int = 300) -> "DominantQueues":
        """Queues are the q nearest classes, candidates the c nearest; Q subset of C."""
        if not (1 <= q <= c):
            raise InvalidArgument(f"need 1 <= q <= c, got q={q}, c={c}")
        if graph.k < c:
            raise InvalidArgument(f"graph depth {graph.k} < candidate capacity {c}")
        return cls(
            queue_ids=graph.neighbor_ids[:, :q].copy(),
            queue_aff=-graph.distances[:, :q].copy(),  # nearer = higher affinity
            cand_ids=graph.neighbor_ids[:, :c].copy(),
        )

    def in_queue(self, i: int, h: int) -> bool:
        return h in self._queue_sets[i]

    def in_candidates(self, i: int, h: int) -> bool:
        return h in self._cand_sets[i]

    def promote(self, i: int, h: int, affinity: float) -> int:
        """Insert h into class i's queue, evicting the weakest-affinity entry."""
        slot = int(np.argmin(self.queue_aff[i]))
        evicted = int(self.queue_ids[i, slot])
        self.queue_ids[i, slot] = h
        self.queue_aff[i, slot] = affinity
        self._queue_sets[i].discard(evicted)
        self._queue_sets[i].add(h)
        return evicted

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQII", _VERSION, self.n_classes, self.q, self.c))
            for i in range(self.n_classes):
                fh.write(np.ascontiguousarray(self.queue_ids[i], dtype="<u4").tobytes())
                fh.write(np.ascontiguousarray(self.queue_aff[i], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(self.cand_ids[i], dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "DominantQueues":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise InvalidArgument(f"{path}: bad magic {magic!r}")
            version, n, q, c = struct.unpack("<IQII", fh.read(20))
            if version != _VERSION:
                raise InvalidArgument(f"{path}: unsupported version {version}")
            queue_ids = np.empty((n, q), dtype=np.int64)
            queue_aff = np.empty((n, q), dtype=np.float64)
            cand_ids = np.empty((n, c), dtype=np.int64)
            for i in range(n):
                queue_ids[i] = np.frombuffer(fh.read(4 * q), dtype="<u4")
                queue_aff[i] = np.frombuffer(fh.read(4 * q), dtype="<f4")
                cand_ids[i] = np.frombuffer(fh.read(4 * c), dtype="<u4")
        return cls(queue_ids, queue_aff, cand_ids)


def select_dominant(
    labels: np.ndarray,
    queues: DominantQueues,
    n_iter: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Class list for one iteration: labels, their queue members, then fillers.

    Batch labels come first, then each feature's queue in batch order with
    duplicates removed, then random distinct fillers up to exactly
    ``n_iter``. A union already larger than ``n_iter`` is a configuration
    bug and errors out.
    """
    labels = np.asarray(labels, dtype=np.int64)
    positives = dedup_keep_order(labels)
    members = [positives]
    for lab in labels:
        row = queues.queue_ids[lab]
        if row.size:
            members.append(row)
    union = dedup_keep_order(np.concatenate(members)) if len(members) > 1 else positives
    if union.size > n_iter:
        raise InvalidArgument(
            f"label/queue union ({union.size}) exceeds n_iter={n_iter}; raise n_iter or shrink q"
        )
    if n_iter > queues.n_classes:
        raise InvalidArgument(f"n_iter={n_iter} exceeds {queues.n_classes} classes")
    fillers = random_fill(union, queues.n_classes, n_iter - union.size, rng)
    return np.concatenate([union, fillers])


@dataclass
class QueueUpdateDecision:
    row: int
    label: int
    predicted: int
    case: str
    evicted: int | None = None
    affinity: float | None = None


def update_queues(
    labels: np.ndarray,
    class_ids: np.ndarray,
    probs: np.ndarray,
    queues: DominantQueues,
) -> list[QueueUpdateDecision]:
    """Apply the four-case update per feature, in batch order.

    The highest-activated class h over the selected set decides the case:
    own class -> no change; already queued -> no change; a known candidate
    -> promote it and evict the weakest queue entry; anything else is
    treated as a noisy label and rejected without mutation.
    """
    labels = np.asarray(labels, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (labels.shape[0], class_ids.shape[0]):
        raise ShapeError("probs must be (batch, selected) shaped")

    decisions: list[QueueUpdateDecision] = []
    for j in range(labels.shape[0]):
        row = probs[j]
        best = row.max()
        tied = class_ids[row == best]
        h = int(tied.min())  # deterministic tie-break: lowest class id
        y = int(labels[j])
        p_h = float(best)
        if h == y:
            decisions.append(QueueUpdateDecision(j, y, h, CASE_CORRECT))
        elif queues.in_queue(y, h):
            decisions.append(QueueUpdateDecision(j, y, h, CASE_IN_QUEUE))
        elif queues.in_candidates(y, h):
            evicted = queues.promote(y, h, p_h)
            decisions.append(
                QueueUpdateDecision(j, y, h, CASE_PROMOTE, evicted=evicted, affinity=p_h)
            )
        else:
            decisions.append(QueueUpdateDecision(j, y, h, CASE_REJECT))
    return decisions
