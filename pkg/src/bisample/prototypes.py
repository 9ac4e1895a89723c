"""Host-memory prototype matrix with per-iteration working sets.

The full N x D class-prototype matrix lives here. Each training iteration
slices out a small working set, trains on it, and writes the updated rows
back; untouched rows stay byte-identical. Rows are re-normalized to unit
norm on every write-back, so the probability a feature assigns to a
prototype doubles as that prototype's gradient energy.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVector, InvalidArgument, ShapeError, StaleWorkingSet
from .numkit import NORM_EPS, check_finite, l2_normalize_rows

log = logging.getLogger(__name__)

_MAGIC = b"LBLP"
_VERSION = 1


@dataclass
class WorkingSet:
    """An owned copy of the prototype rows resident for one iteration."""

    class_ids: np.ndarray  # (n_iter,) distinct class ids; selected positives first
    w_iter: np.ndarray  # (n_iter, D) slice copy
    origin_version: int
    n_positive: int = 0  # leading entries that are batch labels

    @property
    def size(self) -> int:
        return self.class_ids.shape[0]


def random_fill(
    exclude: np.ndarray, n_classes: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` distinct class ids outside ``exclude``, uniformly.

    Partial Fisher-Yates over the remaining ids; cheap for count << N and
    exactly uniform without replacement.
    """
    pool = np.setdiff1d(np.arange(n_classes, dtype=np.int64), exclude)
    if count > pool.shape[0]:
        raise InvalidArgument(f"cannot draw {count} distinct fillers from {pool.shape[0]}")
    for t in range(count):
        j = int(rng.integers(t, pool.shape[0]))
        pool[t], pool[j] = pool[j], pool[t]
    return pool[:count]


def dedup_keep_order(values: np.ndarray) -> np.ndarray:
    """First occurrence wins; order preserved."""
    _, first = np.unique(values, return_index=True)
    return values[np.sort(first)]


class PrototypeStore:
    """Full prototype matrix with versioned, row-sparse synchronization."""

    def __init__(self, w: np.ndarray):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError("prototype matrix must be 2-D")
        check_finite(w, "prototypes")
        self.w = w
        self.version = 0
        self.rows_copied_out = 0
        self.rows_written = 0

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def from_features(
        cls,
        id_features: np.ndarray,
        spot_features: np.ndarray | None = None,
        mode: str = "id",
    ) -> "PrototypeStore":
        """Build one prototype per class from its sample features.

        mode "id" copies the ID feature verbatim; mode "avg" normalizes the
        midpoint of the two features. An antipodal pair has no midpoint
        direction, so that class falls back to its ID feature with a logged
        warning.
        """
        id_features = np.asarray(id_features, dtype=np.float64)
        if mode == "id":
            return cls(id_features.copy())
        if mode != "avg":
            raise InvalidArgument(f"unknown prototype mode {mode!r}")
        if spot_features is None:
            raise InvalidArgument("avg mode needs spot features")
        spot_features = np.asarray(spot_features, dtype=np.float64)
        mid = 0.5 * (id_features + spot_features)
        norms = np.linalg.norm(mid, axis=1)
        degenerate = norms <= NORM_EPS
        if degenerate.any():
            idx = np.nonzero(degenerate)[0]
            log.warning(
                "avg prototype degenerate for %d classes (e.g. %s); using ID feature",
                idx.size,
                idx[:5].tolist(),
            )
            mid[degenerate] = id_features[degenerate]
            norms = np.linalg.norm(mid, axis=1)
        return cls(mid / norms[:, None])

    @classmethod
    def random_init(cls, n_classes: int, dim: int, rng: np.random.Generator) -> "PrototypeStore":
        """Unit-norm Gaussian rows; used for a fresh classification head."""
        w = rng.standard_normal((n_classes, dim))
        return cls(l2_normalize_rows(w))

    def take(self, class_ids: np.ndarray, n_positive: int = 0) -> WorkingSet:
        """Copy the given rows out as a working set stamped with the version."""
        class_ids = np.asarray(class_ids, dtype=np.int64)
        if class_ids.ndim != 1 or class_ids.size == 0:
            raise InvalidArgument("class_ids must be a nonempty 1-D array")
        if np.unique(class_ids).size != class_ids.size:
            raise InvalidArgument("class_ids must be distinct")
        if class_ids.min() < 0 or class_ids.max() >= self.n_classes:
            raise InvalidArgument("class id out of range")
        self.rows_copied_out += class_ids.size
        return WorkingSet(
            class_ids=class_ids.copy(),
            w_iter=self.w[class_ids].copy(),
            origin_version=self.version,
            n_positive=n_positive,
        )

    def select_random(
        self, labels: np.ndarray, n_iter: int, rng: np.random.Generator
    ) -> WorkingSet:
        """Batch labels first, then uniformly drawn distinct filler classes."""
        positives = dedup_keep_order(np.asarray(labels, dtype=np.int64))
        if n_iter < positives.size:
            raise InvalidArgument(
                f"n_iter={n_iter} smaller than {positives.size} distinct batch labels"
            )
        if n_iter > self.n_classes:
            raise InvalidArgument(f"n_iter={n_iter} exceeds {self.n_classes} classes")
        fillers = random_fill(positives, self.n_classes, n_iter - positives.size, rng)
        ids = np.concatenate([positives, fillers])
        return self.take(ids, n_positive=positives.size)

    def write_back(self, ws: WorkingSet, updated: np.ndarray) -> None:
        """Replace exactly the working-set rows (re-normalized); bump version."""
        if ws.origin_version != self.version:
            raise StaleWorkingSet(
                f"working set from version {ws.origin_version}, store at {self.version}"
            )
        updated = np.asarray(updated, dtype=np.float64)
        if updated.shape != ws.w_iter.shape:
            raise ShapeError(f"updated shape {updated.shape} != {ws.w_iter.shape}")
        check_finite(updated, "updated prototypes")
        self.w[ws.class_ids] = l2_normalize_rows(updated)
        self.rows_written += ws.size
        self.version += 1

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQI", _VERSION, self.n_classes, self.dim))
            fh.write(np.ascontiguousarray(self.w, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PrototypeStore":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise InvalidArgument(f"{path}: bad magic {magic!r}")
            version, n, d = struct.unpack("<IQI", fh.read(16))
            if version != _VERSION:
                raise InvalidArgument(f"{path}: unsupported version {version}")
            w = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d)
        return cls(w.astype(np.float64))


@dataclass
class EnergyReport:
    """Gradient energy of the negative prototypes for one batch."""

    neg_class_ids: np.ndarray  # negative classes, in class_ids order
    energies: np.ndarray  # matching E values
    ce: list[tuple[int, float]]  # (K, cumulative fraction), in requested order


def energy_report(
    class_ids: np.ndarray,
    labels: np.ndarray,
    probs: np.ndarray,
    k_list: list[int],
) -> EnergyReport:
    """Energy per negative prototype and the top-K cumulative energy curve.

    A negative prototype's energy is the summed probability mass the batch
    assigns to it; CE at K is the fraction of total negative energy held by
    the K most energetic prototypes. K beyond the negative count is clamped.
    """
    class_ids = np.asarray(class_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (labels.shape[0], class_ids.shape[0]):
        raise ShapeError(f"probs shape {probs.shape} != (M, K)=({labels.shape[0]}, {class_ids.shape[0]})")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max(initial=0.0) > 1e-6:
        raise InvalidArgument("probability rows must sum to 1")

    neg_mask = ~np.isin(class_ids, labels)
    if not neg_mask.any():
        raise InvalidArgument("no negative prototypes in the selected set")
    energies = probs.sum(axis=0)[neg_mask]
    neg_ids = class_ids[neg_mask]

    order = np.argsort(-energies, kind="stable")
    sorted_e = energies[order]
    cumsum = np.cumsum(sorted_e)
    total = cumsum[-1]
    ce = []
    for k in k_list:
        if k < 1:
            raise InvalidArgument(f"K={k} must be >= 1")
        kk = min(int(k), sorted_e.shape[0])
        ce.append((int(k), float(cumsum[kk - 1] / total)))
    return EnergyReport(neg_class_ids=neg_ids, energies=energies, ce=ce)
