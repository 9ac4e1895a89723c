"""Small fully-connected embedding network with explicit forward/backward.

The final layer output is L2-normalized per row, so downstream losses always
see unit-norm features. The backward pass chains exactly through that
normalization (the radial gradient component is projected out).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateVector,
    InvalidArgument,
    NonFinite,
    ShapeError,
    TapeMismatch,
)
from .numkit import NORM_EPS, check_finite

ACTIVATIONS = ("identity", "relu")
KIND_UNKNOWN, KIND_ID, KIND_SPOT = -1, 0, 1

_MAGIC = b"LBLM"
_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("layer weight/bias shapes inconsistent")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")


class EncoderParams:
    """Stack of dense layers; consecutive dimensions must chain."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise InvalidArgument("encoder needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeError(
                    f"layer dims do not chain: {a.weight.shape[0]} -> {b.weight.shape[1]}"
                )
        self.layers = layers
        self.version = 0  # bumped by every sgd_step; stale tapes are detected with it

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_encoder(
    in_dim: int, hidden: tuple[int, ...], feature_dim: int, rng: np.random.Generator
) -> EncoderParams:
    """Glorot-uniform init (weights and biases) from the given stream.

    Hidden layers use relu, the output head is linear; the head output is
    what gets L2-normalized in ``forward``.
    """
    dims = (in_dim, *hidden, feature_dim)
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = rng.uniform(-limit, limit, size=fan_out)
        act = "relu" if k < len(dims) - 2 else "identity"
        layers.append(Layer(w, b, act))
    return EncoderParams(layers)


@dataclass
class FeatureBatch:
    features: np.ndarray  # (M, D), rows unit-norm
    labels: np.ndarray  # (M,) int64 class ids, -1 if unknown
    kinds: np.ndarray  # (M,) int8, KIND_ID / KIND_SPOT / KIND_UNKNOWN

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class Tape:
    params: EncoderParams
    params_version: int
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation per layer
    post: list[np.ndarray] = field(default_factory=list)  # post-activation per layer
    prenorm: np.ndarray | None = None  # head output before normalization
    norms: np.ndarray | None = None  # (M,) row norms of prenorm
    features: np.ndarray | None = None


def forward(
    params: EncoderParams,
    inputs: np.ndarray,
    labels: np.ndarray | None = None,
    kinds: np.ndarray | None = None,
) -> tuple[FeatureBatch, Tape]:
    """Run the network and return unit-norm features plus a backward tape."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.in_dim:
        raise ShapeError(f"expected inputs (M, {params.in_dim}), got {inputs.shape}")
    check_finite(inputs, "encoder inputs")

    tape = Tape(params=params, params_version=params.version, inputs=inputs)
    h = inputs
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        tape.pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        tape.post.append(h)

    norms = np.linalg.norm(h, axis=1)
    if (norms <= NORM_EPS).any():
        bad = int(np.argmin(norms))
        raise DegenerateVector(f"pre-normalization row {bad} has norm {norms[bad]:.3e}")
    features = h / norms[:, None]
    tape.prenorm, tape.norms, tape.features = h, norms, features

    m = inputs.shape[0]
    labels = np.full(m, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    kinds = np.full(m, KIND_UNKNOWN, dtype=np.int8) if kinds is None else np.asarray(kinds, dtype=np.int8)
    if labels.shape != (m,) or kinds.shape != (m,):
        raise ShapeError("labels/kinds must have one entry per input row")
    return FeatureBatch(features=features, labels=labels, kinds=kinds), tape


def backward(
    tape: Tape, upstream: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate feature gradients; returns per-layer (dW, db) and dInputs."""
    params = tape.params
    if tape.params_version != params.version:
        raise TapeMismatch("parameters changed since this tape was recorded")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.features.shape:
        raise ShapeError(f"upstream {upstream.shape} != features {tape.features.shape}")
    check_finite(upstream, "upstream gradient")

    # d(v/||v||) kills the radial component: dv = (g - (g.y) y) / ||v||
    y = tape.features
    radial = np.sum(upstream * y, axis=1, keepdims=True)
    grad = (upstream - radial * y) / tape.norms[:, None]

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.activation == "relu":
            grad = grad * (tape.pre[k] > 0.0)
        below = tape.inputs if k == 0 else tape.post[k - 1]
        grads[k] = (grad.T @ below, grad.sum(axis=0))
        grad = grad @ layer.weight
    return grads, grad


class MomentumState:
    """Per-layer velocity buffers for classical momentum SGD."""

    def __init__(self, params: EncoderParams):
        self.velocity = [
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers
        ]


def sgd_step(
    params: EncoderParams,
    grads: list[tuple[np.ndarray, np.ndarray]],
    lr: float,
    momentum: float = 0.0,
    state: MomentumState | None = None,
) -> EncoderParams:
    """Classical momentum update, in place: v <- mu v + g; w <- w - lr v."""
    if len(grads) != len(params.layers):
        raise ShapeError("gradient list length does not match layer count")
    if momentum != 0.0 and state is None:
        raise InvalidArgument("momentum > 0 requires a MomentumState")
    for k, (layer, (gw, gb)) in enumerate(zip(params.layers, grads)):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {k}")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NonFinite(f"non-finite gradient at layer {k}")
        if momentum == 0.0:
            layer.weight -= lr * gw
            layer.bias -= lr * gb
        else:
            vw, vb = state.velocity[k]
            vw *= momentum
            vw += gw
            vb *= momentum
            vb += gb
            layer.weight -= lr * vw
            layer.bias -= lr * vb
    params.version += 1
    return params


_ACT_TAGS = {"identity": 0, "relu": 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


def save_encoder(params: EncoderParams, path) -> None:
    """Write the checkpoint: magic, version, then per-layer f32 LE blobs."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params.layers)))
        for layer in params.layers:
            out_d, in_d = layer.weight.shape
            fh.write(struct.pack("<III", out_d, in_d, _ACT_TAGS[layer.activation]))
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load_encoder(path) -> EncoderParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InvalidArgument(f"{path}: bad magic {magic!r}")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise InvalidArgument(f"{path}: unsupported version {version}")
        layers = []
        for _ in range(n_layers):
            out_d, in_d, tag = struct.unpack("<III", fh.read(12))
            if tag not in _TAG_ACTS:
                raise InvalidArgument(f"{path}: unknown activation tag {tag}")
            w = np.frombuffer(fh.read(4 * out_d * in_d), dtype="<f4").reshape(out_d, in_d)
            b = np.frombuffer(fh.read(4 * out_d), dtype="<f4")
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64), _TAG_ACTS[tag]))
    return EncoderParams(layers)


def quantize(params: EncoderParams) -> EncoderParams:
    """Round parameters through f32, exactly as a save/load cycle would."""
    return EncoderParams(
        [
            Layer(
                l.weight.astype(np.float32).astype(np.float64),
                l.bias.astype(np.float32).astype(np.float64),
                l.activation,
            )
            for l in params.layers
        ]
    )
