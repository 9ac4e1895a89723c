"""Classification losses over (features x selected prototypes).

Every loss sees an M x K logit table where K is the number of prototype
rows resident this iteration; each feature row must have exactly one
positive column. Losses are averaged over the batch, and the gradients
returned are the exact analytic derivatives of that average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, MissingPositive, NotNormalized, ShapeError
from .numkit import check_finite, softmax_rows


@dataclass
class SelectedLogits:
    logits: np.ndarray  # (M, K)
    probs: np.ndarray  # (M, K), rows sum to 1
    positive_col: np.ndarray  # (M,) column of each row's own class


@dataclass
class PairWeightTable:
    """Per-(feature, prototype) weights: 1-p for the positive, -p otherwise."""

    weights: np.ndarray  # (M, K); rows sum to 0


def positive_columns(labels: np.ndarray, class_ids: np.ndarray | None, k: int) -> np.ndarray:
    """Map each label to its column in the selected slice.

    ``class_ids=None`` means columns are class ids directly (a full head).
    A label absent from the slice is a selection bug and aborts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if class_ids is None:
        if (labels < 0).any() or (labels >= k).any():
            raise MissingPositive("label outside the prototype column range")
        return labels.copy()
    class_ids = np.asarray(class_ids, dtype=np.int64)
    col_of = {int(c): i for i, c in enumerate(class_ids)}
    cols = np.empty(labels.shape[0], dtype=np.int64)
    for j, lab in enumerate(labels):
        try:
            cols[j] = col_of[int(lab)]
        except KeyError:
            raise MissingPositive(f"label {int(lab)} not in the selected class set") from None
    return cols


def _check_inputs(features: np.ndarray, prototypes: np.ndarray) -> None:
    if features.ndim != 2 or prototypes.ndim != 2:
        raise ShapeError("features and prototypes must be 2-D")
    if features.shape[1] != prototypes.shape[1]:
        raise ShapeError(
            f"feature dim {features.shape[1]} != prototype dim {prototypes.shape[1]}"
        )
    check_finite(features, "features")
    check_finite(prototypes, "prototypes")


def _ce_from_logits(
    logits: np.ndarray, positive_col: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    m = logits.shape[0]
    probs = softmax_rows(logits)
    rows = np.arange(m)
    loss = -float(np.mean(np.log(probs[rows, positive_col])))
    grad_logits = probs.copy()
    grad_logits[rows, positive_col] -= 1.0
    grad_logits /= m
    return loss, grad_logits, probs


@dataclass
class SoftmaxResult:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    selected: SelectedLogits


def softmax_ce(
    features: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    class_ids: np.ndarray | None = None,
) -> SoftmaxResult:
    """Plain softmax cross-entropy on dot-product logits, averaged over the batch."""
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    _check_inputs(features, prototypes)
    pos = positive_columns(labels, class_ids, prototypes.shape[0])
    logits = features @ prototypes.T
    loss, grad_logits, probs = _ce_from_logits(logits, pos)
    return SoftmaxResult(
        loss=loss,
        grad_features=grad_logits @ prototypes,
        grad_prototypes=grad_logits.T @ features,
        selected=SelectedLogits(logits=logits, probs=probs, positive_col=pos),
    )


@dataclass
class DummyResult:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    weights: PairWeightTable
    selected: SelectedLogits


def dummy_softmax(
    features: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    class_ids: np.ndarray | None = None,
) -> DummyResult:
    """Pair-weighted reformulation of softmax cross-entropy.

    The probabilities are frozen into per-pair weights (1-p positive,
    -p negative) and the loss becomes a weighted sum of logits. Its
    gradients coincide with ``softmax_ce`` on identical inputs.
    """
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    _check_inputs(features, prototypes)
    m = features.shape[0]
    pos = positive_columns(labels, class_ids, prototypes.shape[0])
    logits = features @ prototypes.T
    probs = softmax_rows(logits)
    weights = -probs
    weights[np.arange(m), pos] += 1.0  # positives: 1 - p
    loss = -float(np.sum(weights * logits)) / m
    coeff = -weights / m  # frozen-weight derivative of the weighted logit sum
    return DummyResult(
        loss=loss,
        grad_features=coeff @ prototypes,
        grad_prototypes=coeff.T @ features,
        weights=PairWeightTable(weights=weights),
        selected=SelectedLogits(logits=logits, probs=probs, positive_col=pos),
    )


_CHEBY = {
    1: (np.array([0.0, 1.0]), np.array([1.0])),
    2: (np.array([-1.0, 0.0, 2.0]), np.array([0.0, 4.0])),
    3: (np.array([0.0, -3.0, 0.0, 4.0]), np.array([-3.0, 0.0, 12.0])),
    4: (np.array([1.0, 0.0, -8.0, 0.0, 8.0]), np.array([0.0, -16.0, 0.0, 32.0])),
}


def _cos_multiple(c: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """cos(m*theta) and d/dc cos(m*theta), both as polynomials in c = cos(theta)."""
    coef, dcoef = _CHEBY[m]
    return np.polynomial.polynomial.polyval(c, coef), np.polynomial.polynomial.polyval(c, dcoef)


def _check_unit_rows(prototypes: np.ndarray) -> None:
    # tolerance leaves room for finite-difference probes around the sphere
    norms = np.linalg.norm(prototypes, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-4:
        raise NotNormalized("margin losses require unit-norm prototype rows")


@dataclass
class MarginResult:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    logits: np.ndarray  # margin-adjusted logits actually fed to the CE


def margin_softmax(
    features: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    kind: str,
    m: float,
    s: float = 1.0,
    class_ids: np.ndarray | None = None,
    blend: float = 1.0,
) -> MarginResult:
    """Margin-adjusted softmax cross-entropy on cosine logits.

    additive: target logit s*(cos - m), others s*cos.
    angular:  target logit s*psi(theta) with psi the monotone piecewise
              extension of cos(m*theta); requires integer m in {1,2,3,4}
              (m=1 degenerates to plain cosine logits). ``blend`` mixes the
              target between plain cosine (0) and the full margin (1), which
              is how training anneals the angular margin in.
    """
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    _check_inputs(features, prototypes)
    _check_unit_rows(prototypes)
    if not 0.0 <= blend <= 1.0:
        raise InvalidArgument(f"blend={blend} outside [0, 1]")
    mb = features.shape[0]
    pos = positive_columns(labels, class_ids, prototypes.shape[0])
    rows = np.arange(mb)
    cos = features @ prototypes.T
    c_pos = cos[rows, pos]

    if kind == "additive":
        if not (s > 0.0 and 0.0 <= m < 1.0):
            raise InvalidArgument("additive margin needs s > 0 and m in [0, 1)")
        target = c_pos - m
        dtarget = np.ones_like(c_pos)
    elif kind == "angular":
        if m not in (1, 2, 3, 4) or int(m) != m:
            raise InvalidArgument("angular margin needs integer m in {1, 2, 3, 4}")
        if s <= 0.0:
            raise InvalidArgument("angular margin needs s > 0")
        mi = int(m)
        theta = np.arccos(np.clip(c_pos, -1.0, 1.0))
        k = np.minimum(np.floor(mi * theta / np.pi), mi - 1)
        sign = np.where(k % 2 == 0, 1.0, -1.0)
        cm, dcm = _cos_multiple(c_pos, mi)
        psi = sign * cm - 2.0 * k
        target = (1.0 - blend) * c_pos + blend * psi
        dtarget = (1.0 - blend) + blend * sign * dcm  # k is locally constant
    else:
        raise InvalidArgument(f"unknown margin kind {kind!r}")

    logits = s * cos
    logits[rows, pos] = s * target
    loss, grad_logits, _probs = _ce_from_logits(logits, pos)

    # chain rule back to the cosine table; the target column carries dtarget
    grad_cos = grad_logits * s
    grad_cos[rows, pos] *= dtarget
    return MarginResult(
        loss=loss,
        grad_features=grad_cos @ prototypes,
        grad_prototypes=grad_cos.T @ features,
        logits=logits,
    )


@dataclass
class HybridResult:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    probs: np.ndarray  # plain (un-margined) probability table
    positive_col: np.ndarray


def hybrid_signal(
    features: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    m: float,
    s: float = 1.0,
    class_ids: np.ndarray | None = None,
    blend: float = 1.0,
) -> HybridResult:
    """Angular-margin gradients plus the plain-softmax probability table.

    The gradients drive training; the probabilities (softmax of the
    un-margined, scale-retained logits) feed queue updates and energy
    diagnostics.
    """
    res = margin_softmax(
        features, prototypes, labels, "angular", m, s, class_ids=class_ids, blend=blend
    )
    pos = positive_columns(labels, class_ids, np.asarray(prototypes).shape[0])
    plain = softmax_rows(s * (np.asarray(features, dtype=np.float64) @ np.asarray(prototypes, dtype=np.float64).T))
    return HybridResult(
        loss=res.loss,
        grad_features=res.grad_features,
        grad_prototypes=res.grad_prototypes,
        probs=plain,
        positive_col=pos,
    )
