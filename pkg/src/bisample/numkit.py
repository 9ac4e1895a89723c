"""Dense numeric kernels and gradient-verification utilities.

Matrices throughout the package are plain numpy ``float64`` arrays in
row-major layout; 32-bit floats appear only inside on-disk formats. All
reductions here are deterministic, so identical inputs reproduce identical
bits run after run on the same platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateVector, InvalidArgument, NonFinite

NORM_EPS = 1e-12


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    """Raise ``NonFinite`` if ``arr`` contains NaN or infinity."""
    if not np.isfinite(arr).all():
        raise NonFinite(f"{what} contains non-finite values")


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax of a 1-D logit vector, shifted by the max so it never overflows.

    The result sums to 1 and is invariant under adding a constant to all
    logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise InvalidArgument("softmax needs a nonempty 1-D logit vector")
    check_finite(logits, "logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-D logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise InvalidArgument("softmax_rows needs a nonempty 2-D logit matrix")
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale ``v`` to unit L2 norm; direction is preserved exactly.

    Vectors with norm <= ``eps`` are an error, never silently zeroed; the
    caller decides the fallback.
    """
    v = np.asarray(v, dtype=np.float64)
    check_finite(v, "vector")
    norm = float(np.linalg.norm(v))
    if norm <= eps:
        raise DegenerateVector(f"norm {norm:.3e} <= eps {eps:.3e}")
    return v / norm


def l2_normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Row-wise unit normalization of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    check_finite(m, "matrix")
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms <= eps)[0]
    if bad.size:
        raise DegenerateVector(f"rows {bad[:8].tolist()} have norm <= eps {eps:.3e}")
    return m / norms[:, None]


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    passed: bool


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``x0``.

    Coordinates are perturbed one at a time; the relative error uses a
    ``max(|a|, |b|, 1e-8)`` denominator so near-zero gradients do not blow
    up the ratio.
    """
    if not (1e-6 <= h <= 1e-3):
        raise InvalidArgument(f"h={h} outside [1e-6, 1e-3]")
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise InvalidArgument("analytic gradient shape does not match x0")

    flat = x0.ravel().copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(flat.reshape(x0.shape)))
        flat[i] = orig - h
        fm = float(f(flat.reshape(x0.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"f evaluated non-finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)

    ana = analytic.ravel()
    abs_err = np.abs(ana - numeric)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-8)
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err))
    return GradCheckReport(
        max_abs_err=float(abs_err.max(initial=0.0)),
        max_rel_err=float(rel_err.max(initial=0.0)),
        worst_index=worst,
        passed=bool(rel_err.max(initial=0.0) <= tol),
    )
