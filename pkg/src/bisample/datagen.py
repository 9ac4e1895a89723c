"""Synthetic bisample data: N identities with one enrollment ("id") and one
probe ("spot") vector each, plus a thick multi-sample set for pretraining.

Identities live in a shared latent space observed through one fixed random
projection per world seed, so datasets generated from the same seed with
disjoint class-id ranges are distinct people in the same world. Spot
samples carry heavier noise and a fixed bias vector (the heterogeneity
between enrollment and capture conditions); optional label noise swaps
spot samples between classes, and some spots are replaced by high-noise
captures.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgument
from .rngkit import substream

_MAGIC_BISAMPLE = b"LBLD"
_MAGIC_THICK = b"LBLT"
_VERSION = 1

LOW_QUALITY_NOISE_FACTOR = 4.0

FLAG_MISLABEL = "mislabel"
FLAG_LOW_QUALITY = "low_quality"


@dataclass(frozen=True)
class GenSpec:
    """Knobs for one synthetic set.

    Class signals come out of the projection with unit norm on average, so
    the noise sigmas and the heterogeneity shift read as fractions of the
    signal magnitude (0.25 = a quarter of the signal, in expectation).
    """

    n_classes: int
    input_dim: int = 64
    latent_dim: int = 16
    id_noise_sigma: float = 0.05
    spot_noise_sigma: float = 0.25
    heterogeneity_shift: float = 0.3
    mislabel_rate: float = 0.01
    low_quality_rate: float = 0.02
    seed: int = 0
    class_id_start: int = 0  # world-level identity offset; disjoint ranges = disjoint people
    confusion_frac: float = 0.5  # fraction of spot-noise variance inside the identity manifold
    confusion_modes: int = 0  # >0 confines that variance to this many shared capture modes

    def __post_init__(self):
        if self.n_classes < 1 or self.input_dim < 1 or self.latent_dim < 1:
            raise InvalidArgument("n_classes, input_dim, latent_dim must be positive")
        if self.spot_noise_sigma < self.id_noise_sigma:
            raise InvalidArgument("spot noise must be >= id noise (spot is the unconstrained side)")
        for name in ("mislabel_rate", "low_quality_rate"):
            r = getattr(self, name)
            if not (0.0 <= r < 1.0):
                raise InvalidArgument(f"{name}={r} outside [0, 1)")
        if self.heterogeneity_shift < 0 or self.id_noise_sigma < 0:
            raise InvalidArgument("noise/shift magnitudes must be >= 0")
        if not (0.0 <= self.confusion_frac <= 1.0):
            raise InvalidArgument(f"confusion_frac={self.confusion_frac} outside [0, 1]")
        if not (0 <= self.confusion_modes <= self.latent_dim):
            raise InvalidArgument("confusion_modes must lie in [0, latent_dim]")


@dataclass
class BisampleDataset:
    id_inputs: np.ndarray  # (N, dim) float64
    spot_inputs: np.ndarray  # (N, dim)
    gen: GenSpec | None = None
    flags: dict[int, tuple[str, ...]] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.id_inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.id_inputs.shape[1]


@dataclass
class PretrainDataset:
    """Thick set: S perturbed samples per class, no id/spot structure."""

    samples: np.ndarray  # (N, S, dim)
    gen: GenSpec | None = None

    @property
    def n_classes(self) -> int:
        return self.samples.shape[0]

    @property
    def samples_per_class(self) -> int:
        return self.samples.shape[1]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[2]


def _projection(spec: GenSpec) -> np.ndarray:
    """World observation map, scaled so latent signals come out near unit norm."""
    rng = substream(spec.seed, "projection")
    scale = 1.0 / np.sqrt(spec.input_dim * spec.latent_dim)
    return rng.standard_normal((spec.input_dim, spec.latent_dim)) * scale


def _shift_vector(spec: GenSpec) -> np.ndarray:
    rng = substream(spec.seed, "shift")
    direction = rng.standard_normal(spec.input_dim)
    direction /= np.linalg.norm(direction)
    return spec.heterogeneity_shift * direction


def _noise_scale(spec: GenSpec, sigma: float) -> float:
    # per-coordinate scale such that the noise norm is ~sigma in expectation
    return sigma / np.sqrt(spec.input_dim)


def _confusion_basis(spec: GenSpec) -> np.ndarray | None:
    """Shared capture-mode directions in latent space (pose/illumination
    analogs); every dataset of the same world confuses along the same modes."""
    if spec.confusion_modes == 0:
        return None
    rng = substream(spec.seed, "confusion_modes")
    raw = rng.standard_normal((spec.latent_dim, spec.confusion_modes))
    basis, _ = np.linalg.qr(raw)
    return basis


def _spot_noise(
    spec: GenSpec,
    proj: np.ndarray,
    rng: np.random.Generator,
    count: int,
    modes: np.ndarray | None = None,
) -> np.ndarray:
    """Capture noise: partly a perturbation inside the identity manifold
    (what makes a probe resemble a different class), partly isotropic. With
    capture modes configured, the manifold part is confined to them."""
    sigma = spec.spot_noise_sigma
    zeta = rng.standard_normal((count, spec.latent_dim))
    if modes is not None:
        k = spec.confusion_modes
        zeta = (zeta[:, :k] / np.sqrt(k / spec.latent_dim)) @ modes.T  # same expected norm
    latent_part = np.sqrt(spec.confusion_frac) * sigma * (zeta @ proj.T)
    iso_part = np.sqrt(1.0 - spec.confusion_frac) * sigma / np.sqrt(spec.input_dim) * rng.standard_normal(
        (count, spec.input_dim)
    )
    return latent_part + iso_part


def _class_base_and_noise(
    spec: GenSpec, proj: np.ndarray, local_idx: int, modes: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class draws from the class's own stream (parallel-safe)."""
    rng = substream(spec.seed, "class", spec.class_id_start + local_idx)
    z = rng.standard_normal(spec.latent_dim)
    eps_id = rng.standard_normal(spec.input_dim) * _noise_scale(spec, spec.id_noise_sigma)
    eps_spot = _spot_noise(spec, proj, rng, 1, modes)[0]
    return proj @ z, eps_id, eps_spot


def generate(spec: GenSpec) -> BisampleDataset:
    """Generate the bisample set: per class an id sample and a shifted,
    noisier spot sample, then inject low-quality spots and pairwise spot
    swaps at the configured rates. Deterministic under the seed."""
    proj = _projection(spec)
    shift = _shift_vector(spec)
    modes = _confusion_basis(spec)
    n, d = spec.n_classes, spec.input_dim
    id_inputs = np.empty((n, d))
    spot_inputs = np.empty((n, d))
    bases = np.empty((n, d))
    for i in range(n):
        base, eps_id, eps_spot = _class_base_and_noise(spec, proj, i, modes)
        bases[i] = base
        id_inputs[i] = base + eps_id
        spot_inputs[i] = base + eps_spot + shift

    flags: dict[int, list[str]] = {}

    n_lowq = int(np.floor(spec.low_quality_rate * n))
    if n_lowq:
        rng = substream(spec.seed, "low_quality")
        chosen = _draw_distinct(rng, n, n_lowq)
        scale = _noise_scale(spec, LOW_QUALITY_NOISE_FACTOR * spec.spot_noise_sigma)
        for c in chosen:
            spot_inputs[c] = bases[c] + rng.standard_normal(d) * scale + shift
            flags.setdefault(int(c), []).append(FLAG_LOW_QUALITY)

    n_swap = int(np.floor(spec.mislabel_rate * n))
    n_swap -= n_swap % 2  # swaps are pairwise so the participant count is even
    if n_swap:
        rng = substream(spec.seed, "mislabel")
        chosen = _draw_distinct(rng, n, n_swap)
        for a, b in zip(chosen[0::2], chosen[1::2]):
            spot_inputs[[a, b]] = spot_inputs[[b, a]]
            flags.setdefault(int(a), []).append(FLAG_MISLABEL)
            flags.setdefault(int(b), []).append(FLAG_MISLABEL)

    return BisampleDataset(
        id_inputs=id_inputs,
        spot_inputs=spot_inputs,
        gen=spec,
        flags={k: tuple(v) for k, v in sorted(flags.items())},
    )


def _draw_distinct(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """count distinct indices in [0, n), uniform, via partial Fisher-Yates."""
    pool = np.arange(n, dtype=np.int64)
    for t in range(count):
        j = int(rng.integers(t, n))
        pool[t], pool[j] = pool[j], pool[t]
    return pool[:count]


def _class_pool(
    spec: GenSpec, proj: np.ndarray, local_idx: int, s: int, modes: np.ndarray | None
) -> np.ndarray:
    """S perturbed samples of one class (thick-style), from its own stream."""
    rng = substream(spec.seed, "class", spec.class_id_start + local_idx)
    z = rng.standard_normal(spec.latent_dim)
    base = proj @ z
    return base[None, :] + _spot_noise(spec, proj, rng, s, modes)


def generate_thick(spec: GenSpec, samples_per_class: int = 16) -> PretrainDataset:
    """Thick multi-sample set for pretraining; spot sigma is the within-class spread."""
    if samples_per_class <= 2:
        raise InvalidArgument("a thick set needs more than 2 samples per class")
    proj = _projection(spec)
    modes = _confusion_basis(spec)
    out = np.empty((spec.n_classes, samples_per_class, spec.input_dim))
    for i in range(spec.n_classes):
        out[i] = _class_pool(spec, proj, i, samples_per_class, modes)
    return PretrainDataset(samples=out, gen=spec)


def split_thick_mini(
    spec_thick: GenSpec, spec_mini: GenSpec, samples_per_class: int = 16
) -> tuple[PretrainDataset, BisampleDataset]:
    """Thick pretraining set plus a bisample set drawn as 2-of-S per class.

    The two specs must cover disjoint class-id ranges (no identity overlap).
    Each mini class generates a thick-style pool and keeps two random
    samples of it, mimicking a bisample corpus carved out of a larger one.
    """
    a = (spec_thick.class_id_start, spec_thick.class_id_start + spec_thick.n_classes)
    b = (spec_mini.class_id_start, spec_mini.class_id_start + spec_mini.n_classes)
    if a[0] < b[1] and b[0] < a[1]:
        raise InvalidArgument(f"class-id ranges overlap: {a} vs {b}")

    thick = generate_thick(spec_thick, samples_per_class)

    proj = _projection(spec_mini)
    modes = _confusion_basis(spec_mini)
    n, d = spec_mini.n_classes, spec_mini.input_dim
    id_inputs = np.empty((n, d))
    spot_inputs = np.empty((n, d))
    for i in range(n):
        rng = substream(spec_mini.seed, "class", spec_mini.class_id_start + i)
        z = rng.standard_normal(spec_mini.latent_dim)
        base = proj @ z
        pool = base[None, :] + _spot_noise(spec_mini, proj, rng, samples_per_class, modes)
        first = int(rng.integers(0, samples_per_class))
        second = int(rng.integers(0, samples_per_class - 1))
        if second >= first:
            second += 1
        id_inputs[i] = pool[first]
        spot_inputs[i] = pool[second]
    return thick, BisampleDataset(id_inputs=id_inputs, spot_inputs=spot_inputs, gen=spec_mini)


def subset(ds: BisampleDataset, class_rows: np.ndarray) -> BisampleDataset:
    """Re-indexed dataset over the given class rows (labels become 0..k-1)."""
    class_rows = np.asarray(class_rows, dtype=np.int64)
    return BisampleDataset(
        id_inputs=ds.id_inputs[class_rows].copy(),
        spot_inputs=ds.spot_inputs[class_rows].copy(),
        gen=ds.gen,
        flags={},
    )


@dataclass
class TestPairs:
    """Every id x spot cross pair; genuine where the indices agree."""

    id_idx: np.ndarray
    spot_idx: np.ndarray
    genuine: np.ndarray

    @property
    def n_genuine(self) -> int:
        return int(self.genuine.sum())

    @property
    def n_impostor(self) -> int:
        return int(self.genuine.size - self.genuine.sum())


def make_test_pairs(ds: BisampleDataset) -> TestPairs:
    """All n genuine pairs plus the n(n-1) cross impostor pairs."""
    n = ds.n_classes
    id_idx = np.repeat(np.arange(n, dtype=np.int32), n)
    spot_idx = np.tile(np.arange(n, dtype=np.int32), n)
    return TestPairs(id_idx=id_idx, spot_idx=spot_idx, genuine=id_idx == spot_idx)


def save_bisample(ds: BisampleDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_BISAMPLE)
        fh.write(struct.pack("<IQI", _VERSION, ds.n_classes, ds.input_dim))
        for i in range(ds.n_classes):
            fh.write(np.ascontiguousarray(ds.id_inputs[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.spot_inputs[i], dtype="<f4").tobytes())


def load_bisample(path) -> BisampleDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC_BISAMPLE:
            raise InvalidArgument(f"{path}: bad magic {magic!r}")
        version, n, d = struct.unpack("<IQI", fh.read(16))
        if version != _VERSION:
            raise InvalidArgument(f"{path}: unsupported version {version}")
        block = np.frombuffer(fh.read(4 * n * 2 * d), dtype="<f4").reshape(n, 2, d)
    return BisampleDataset(
        id_inputs=block[:, 0, :].astype(np.float64),
        spot_inputs=block[:, 1, :].astype(np.float64),
    )


def save_thick(ds: PretrainDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_THICK)
        fh.write(struct.pack("<IQII", _VERSION, ds.n_classes, ds.samples_per_class, ds.input_dim))
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())


def load_thick(path) -> PretrainDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC_THICK:
            raise InvalidArgument(f"{path}: bad magic {magic!r}")
        version, n, s, d = struct.unpack("<IQII", fh.read(20))
        if version != _VERSION:
            raise InvalidArgument(f"{path}: unsupported version {version}")
        samples = np.frombuffer(fh.read(4 * n * s * d), dtype="<f4").reshape(n, s, d)
    return PretrainDataset(samples=samples.astype(np.float64))


def write_flags_sidecar(ds: BisampleDataset, path) -> None:
    """Ground-truth noise flags, one "class_id,flag" line each.

    Test-introspection only; training never reads this file.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for cid, tags in sorted(ds.flags.items()):
            for tag in tags:
                fh.write(f"{cid},{tag}\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def with_seed(spec: GenSpec, seed: int) -> GenSpec:
    return replace(spec, seed=seed)
