"""In-batch verification losses: mined contrastive and swapped triplet.

Both operate on cosine similarities of unit-norm features. Mining gates
(pair weights, retained-triplet masks, swap branches) are decided on the
forward values and treated as constants in the backward pass; that is what
the ``*_frozen`` variants re-evaluate for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import KIND_ID, KIND_SPOT, FeatureBatch
from .errors import InvalidArgument, InvalidBatch


@dataclass
class PairSet:
    """All j<k feature pairs with their mined weights (+1 / -1 / 0)."""

    j: np.ndarray
    k: np.ndarray
    same: np.ndarray  # bool, y_jk
    sims: np.ndarray
    weights: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.j.shape[0]

    @property
    def weighted_sum(self) -> float:
        """The raw pair term: sum of weight * similarity over all pairs."""
        return float(np.dot(self.weights, self.sims))


@dataclass
class ContrastiveResult:
    loss: float
    grad_features: np.ndarray
    pairs: PairSet


def _all_pairs(m: int) -> tuple[np.ndarray, np.ndarray]:
    j, k = np.triu_indices(m, k=1)
    return j.astype(np.int64), k.astype(np.int64)


def contrastive_loss(batch: FeatureBatch, tau: float) -> ContrastiveResult:
    """Mined contrastive loss over every in-batch pair.

    Positive pairs weigh +1; negative pairs weigh -1 only when their
    similarity reaches ``tau``, easy negatives are gated out. The weighted
    similarity sum is divided by the batch size for scale stability.
    """
    if not (-1.0 < tau < 1.0):
        raise InvalidArgument(f"tau={tau} outside (-1, 1)")
    m = batch.size
    if m < 2:
        raise InvalidBatch("contrastive needs at least two samples")
    x = batch.features
    j, k = _all_pairs(m)
    sims = np.sum(x[j] * x[k], axis=1)
    same = batch.labels[j] == batch.labels[k]
    weights = np.where(same, 1.0, np.where(sims >= tau, -1.0, 0.0))
    pairs = PairSet(j=j, k=k, same=same, sims=sims, weights=weights)
    loss, grad = contrastive_loss_frozen(x, pairs)
    return ContrastiveResult(loss=loss, grad_features=grad, pairs=pairs)


def contrastive_loss_frozen(
    features: np.ndarray, pairs: PairSet
) -> tuple[float, np.ndarray]:
    """Loss and feature gradients with the pair weights held fixed."""
    m = features.shape[0]
    sims = np.sum(features[pairs.j] * features[pairs.k], axis=1)
    loss = -float(np.dot(pairs.weights, sims)) / m
    grad = np.zeros_like(features)
    coeff = -pairs.weights[:, None] / m
    np.add.at(grad, pairs.j, coeff * features[pairs.k])
    np.add.at(grad, pairs.k, coeff * features[pairs.j])
    return loss, grad


@dataclass
class NPairsPlan:
    """Index plan for a P-classes-times-two-samples mini-batch."""

    class_rows: np.ndarray  # (P,) dataset row indices, used as labels
    labels: np.ndarray  # (2P,) pattern aabbcc
    kinds: np.ndarray  # (2P,) alternating KIND_ID, KIND_SPOT

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]

    def gather(self, dataset) -> np.ndarray:
        """Materialize the (2P, dim) input block from a bisample dataset."""
        rows = np.empty((self.batch_size, dataset.input_dim), dtype=np.float64)
        rows[0::2] = dataset.id_inputs[self.class_rows]
        rows[1::2] = dataset.spot_inputs[self.class_rows]
        return rows


def build_npairs_batch(dataset, classes_per_batch: int, rng: np.random.Generator) -> NPairsPlan:
    """Pick distinct classes and take both of their samples."""
    n = dataset.n_classes
    if not (1 <= classes_per_batch <= n):
        raise InvalidArgument(f"classes_per_batch={classes_per_batch} not in [1, {n}]")
    chosen = rng.choice(n, size=classes_per_batch, replace=False).astype(np.int64)
    labels = np.repeat(chosen, 2)
    kinds = np.tile(np.array([KIND_ID, KIND_SPOT], dtype=np.int8), classes_per_batch)
    return NPairsPlan(class_rows=chosen, labels=labels, kinds=kinds)


@dataclass
class TripletSet:
    """Retained (anchor, positive, negative) triplets after mining.

    ``swapped`` marks triplets whose effective negative similarity came from
    the positive end of the pair rather than the anchor. ``denominator`` is
    the count the loss averages over (retained count when mining, total
    candidate count otherwise).
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    swapped: np.ndarray
    sim_ap: np.ndarray
    sim_eff: np.ndarray
    margin: float
    denominator: int

    @property
    def n_retained(self) -> int:
        return self.anchor.shape[0]


@dataclass
class TripletResult:
    loss: float
    grad_features: np.ndarray
    triplets: TripletSet


def triplet_loss(
    batch: FeatureBatch, margin: float, swap: bool = True, mine: bool = True
) -> TripletResult:
    """Margin triplet loss over all same-class ordered pairs x in-batch negatives.

    With ``swap`` the negative similarity becomes max(sim(a,n), sim(p,n)),
    so each pair effectively contributes both orientations. With ``mine``
    triplets already satisfying the margin are dropped before averaging.
    """
    m = batch.size
    labels = batch.labels
    x = batch.features
    sims = x @ x.T

    same = labels[:, None] == labels[None, :]
    a_idx, p_idx = np.nonzero(same & ~np.eye(m, dtype=bool))
    if a_idx.size == 0:
        raise InvalidBatch("batch has no positive pair")

    neg_mask = ~same  # (m, m): candidate negatives per row
    anchors, positives, negatives = [], [], []
    for a, p in zip(a_idx, p_idx):
        negs = np.nonzero(neg_mask[a])[0]
        anchors.append(np.full(negs.size, a))
        positives.append(np.full(negs.size, p))
        negatives.append(negs)
    anchor = np.concatenate(anchors)
    positive = np.concatenate(positives)
    negative = np.concatenate(negatives)

    sim_ap = sims[anchor, positive]
    sim_an = sims[anchor, negative]
    if swap:
        sim_pn = sims[positive, negative]
        swapped = sim_pn > sim_an
        sim_eff = np.where(swapped, sim_pn, sim_an)
    else:
        swapped = np.zeros(anchor.shape[0], dtype=bool)
        sim_eff = sim_an

    violation = margin - sim_ap + sim_eff
    total = anchor.shape[0]
    active = violation > 0.0
    if mine:
        keep = active
        denominator = int(keep.sum())
    else:
        keep = active  # inactive triplets contribute zero loss and gradient
        denominator = total

    tset = TripletSet(
        anchor=anchor[keep],
        positive=positive[keep],
        negative=negative[keep],
        swapped=swapped[keep],
        sim_ap=sim_ap[keep],
        sim_eff=sim_eff[keep],
        margin=margin,
        denominator=denominator,
    )
    loss, grad = triplet_loss_frozen(x, tset)
    return TripletResult(loss=loss, grad_features=grad, triplets=tset)


def triplet_loss_frozen(features: np.ndarray, tset: TripletSet) -> tuple[float, np.ndarray]:
    """Loss and gradients with mining mask and swap branches held fixed."""
    grad = np.zeros_like(features)
    if tset.n_retained == 0 or tset.denominator == 0:
        return 0.0, grad
    a, p, n = tset.anchor, tset.positive, tset.negative
    # the swap winner takes the negative-similarity gradient
    b = np.where(tset.swapped, p, a)
    sim_ap = np.sum(features[a] * features[p], axis=1)
    sim_eff = np.sum(features[b] * features[n], axis=1)
    loss = float(np.sum(tset.margin - sim_ap + sim_eff)) / tset.denominator

    scale = 1.0 / tset.denominator
    np.add.at(grad, a, -scale * features[p])
    np.add.at(grad, p, -scale * features[a])
    np.add.at(grad, b, scale * features[n])
    np.add.at(grad, n, scale * features[b])
    return loss, grad
