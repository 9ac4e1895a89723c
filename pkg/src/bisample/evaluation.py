"""Open-set verification evaluation: cosine scoring, ROC, VR at fixed FAR.

Thresholding is step-conservative: the reported operating point never
exceeds the requested false-acceptance target, and the achieved FAR is
reported alongside. FAR targets below the resolution of the impostor set
are refused rather than reported as zero-pass pseudo-rates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .datagen import BisampleDataset, TestPairs
from .errors import InvalidArgument, ResolutionError, ShapeError


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        for name, arr in (("genuine", self.genuine), ("impostor", self.impostor)):
            if arr.size and (arr.min() < -1.0 - 1e-9 or arr.max() > 1.0 + 1e-9):
                raise InvalidArgument(f"{name} scores outside [-1, 1]: cosine expected")


@dataclass
class RocCurve:
    """Operating points sorted by threshold descending; FAR and VR are both
    non-decreasing as the threshold drops."""

    thresholds: np.ndarray
    far: np.ndarray
    vr: np.ndarray


@dataclass
class FarPoint:
    target: float
    achieved_far: float
    threshold: float
    vr: float


def batched_features(params: enc.EncoderParams, inputs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((inputs.shape[0], params.out_dim))
    for start in range(0, inputs.shape[0], chunk):
        stop = min(start + chunk, inputs.shape[0])
        fb, _ = enc.forward(params, inputs[start:stop])
        out[start:stop] = fb.features
    return out


def score_pairs(params: enc.EncoderParams, ds: BisampleDataset, pairs: TestPairs) -> ScoreSet:
    """Cosine scores of unit features for every listed pair."""
    if ds.input_dim != params.in_dim:
        raise ShapeError(f"dataset dim {ds.input_dim} != encoder input dim {params.in_dim}")
    id_feats = batched_features(params, ds.id_inputs)
    spot_feats = batched_features(params, ds.spot_inputs)
    scores = np.sum(id_feats[pairs.id_idx] * spot_feats[pairs.spot_idx], axis=1)
    return ScoreSet(genuine=scores[pairs.genuine], impostor=scores[~pairs.genuine])


def _pass_fraction(sorted_asc: np.ndarray, threshold: float) -> float:
    """Fraction of scores >= threshold."""
    idx = np.searchsorted(sorted_asc, threshold, side="left")
    return (sorted_asc.size - idx) / sorted_asc.size


def roc(scores: ScoreSet) -> RocCurve:
    """Exact empirical ROC from one sort over all distinct score values.

    A sentinel threshold above every score anchors the curve at (0, 0).
    """
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise InvalidArgument("both genuine and impostor scores are required")
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    values = np.unique(np.concatenate([gen, imp]))
    thresholds = np.concatenate([[values[-1] + 1.0], values[::-1]])
    n_g, n_i = gen.size, imp.size
    far = (n_i - np.searchsorted(imp, thresholds, side="left")) / n_i
    vr = (n_g - np.searchsorted(gen, thresholds, side="left")) / n_g
    return RocCurve(thresholds=thresholds, far=far, vr=vr)


def vr_at_far(scores: ScoreSet, far_targets: list[float]) -> list[FarPoint]:
    """Verification rate at each FAR target, thresholded conservatively.

    The threshold is the smallest score value whose impostor-pass fraction
    stays at or below the target, so the achieved FAR never exceeds it.
    """
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise InvalidArgument("both genuine and impostor scores are required")
    imp = np.sort(scores.impostor)
    gen = np.sort(scores.genuine)
    n_i = imp.size
    min_far = 1.0 / n_i
    values = np.unique(np.concatenate([gen, imp]))
    candidates = np.concatenate([values, [values[-1] + 1.0]])
    cand_far = (n_i - np.searchsorted(imp, candidates, side="left")) / n_i

    points = []
    for target in far_targets:
        if target < min_far:
            raise ResolutionError(
                f"FAR target {target:g} below resolution; minimum supported is {min_far:g} "
                f"with {n_i} impostors"
            )
        ok = np.nonzero(cand_far <= target)[0]
        t = float(candidates[ok[0]])  # far is non-increasing in t: first ok index = smallest t
        points.append(
            FarPoint(
                target=float(target),
                achieved_far=float(cand_far[ok[0]]),
                threshold=t,
                vr=_pass_fraction(gen, t),
            )
        )
    return points


def write_far_report(points: list[FarPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["far_target", "achieved_far", "threshold", "vr"])
        for p in points:
            writer.writerow([f"{p.target:.6g}", f"{p.achieved_far:.8g}", f"{p.threshold:.8g}", f"{p.vr:.8g}"])


def write_roc_points(curve: RocCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "vr"])
        for t, f, v in zip(curve.thresholds, curve.far, curve.vr):
            writer.writerow([f"{t:.8g}", f"{f:.8g}", f"{v:.8g}"])


def write_roc_svg(curve: RocCurve, path, width: int = 480, height: int = 480) -> None:
    """Static log-FAR ROC plot; hand-rolled SVG so the artifact has no UI deps."""
    pad = 48
    far = np.clip(curve.far, 1e-8, 1.0)
    lo = np.log10(max(float(far[far > 0].min(initial=1e-8)), 1e-8))
    hi = 0.0

    def x_of(f):
        return pad + (np.log10(max(f, 1e-8)) - lo) / (hi - lo or 1.0) * (width - 2 * pad)

    def y_of(v):
        return height - pad - v * (height - 2 * pad)

    pts = " ".join(
        f"{x_of(f):.1f},{y_of(v):.1f}" for f, v in zip(curve.far, curve.vr) if f > 0
    )
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>',
        f'<text x="{width//2}" y="{height-12}" text-anchor="middle" font-size="12">false accept rate (log)</text>',
        f'<text x="14" y="{height//2}" transform="rotate(-90 14 {height//2})" text-anchor="middle" font-size="12">verification rate</text>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
