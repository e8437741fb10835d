"""NT-Xent contrastive loss and triplet margin loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DISTANCES = ("squared_euclidean", "euclidean", "cosine_distance")


@dataclass(frozen=True)
class ContrastiveLossConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("/temperature", "must be > 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if not self.margin >= 0:
            raise ConfigError("/margin", "must be >= 0")
        if self.distance not in DISTANCES:
            raise ConfigError("/distance", f"must be one of {DISTANCES}")

    def to_dict(self):
        return asdict(self)


def half_swap_pairing(n: int) -> np.ndarray:
    """Pairing i <-> n+i for a stacked batch of 2n rows."""
    return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


def _validate_pairing(pairing, rows: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.intp)
    if pairing.shape != (rows,):
        raise ValueError(f"pairing must have one entry per row ({rows}), got shape {pairing.shape}")
    idx = np.arange(rows)
    if ((pairing < 0) | (pairing >= rows)).any() or (pairing == idx).any() or (pairing[pairing] != idx).any():
        raise ValueError("pairing must be a perfect matching (an involution without fixed points)")
    return pairing


def positive_weights(pairing, labels=None, visible=None) -> np.ndarray:
    """Row-stochastic weights over each anchor's positive set.

    Every anchor's positive set contains its paired row. When ``labels`` and
    ``visible`` are given, rows whose labels are both visible and equal are
    added as positives too.
    """
    rows = len(pairing)
    pos = np.zeros((rows, rows), dtype=bool)
    pos[np.arange(rows), pairing] = True
    if labels is not None and visible is not None:
        labels = np.asarray(labels)
        visible = np.asarray(visible, dtype=bool)
        same = (labels[:, None] == labels[None, :]) & visible[:, None] & visible[None, :]
        pos |= same
    np.fill_diagonal(pos, False)
    return pos / pos.sum(axis=1, keepdims=True)


def nt_xent(
    z: Tensor,
    pairing: Sequence[int],
    config: ContrastiveLossConfig = ContrastiveLossConfig(),
    labels=None,
    visible=None,
) -> Tensor:
    """Mean NT-Xent over all 2N anchors of unit-norm rows ``z``.

    Per anchor: ``-log(exp(s_ij/t) / sum_{k != i} exp(s_ik/t))`` with s the
    cosine similarity. With ``labels``/``visible`` the positive term is the
    mean over the anchor's positive set (see :func:`positive_weights`).
    """
    if not config.temperature > 0:
        raise ConfigError("/temperature", "must be > 0")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise DimensionError(f"nt_xent expects 2N >= 2 rows, got shape {z.shape}")
    rows = z.shape[0]
    pairing = _validate_pairing(pairing, rows)
    weights = positive_weights(pairing, labels, visible).astype(z.dtype)

    logits = T.scale(T.matmul(z, T.transpose(z)), 1.0 / config.temperature)
    others = ~np.eye(rows, dtype=bool)
    denom = T.masked_logsumexp(logits, others)
    positive = T.sum(T.mul(logits, Tensor(weights)), axis=1)
    return T.mean(T.sub(denom, positive))


def distance(a: Tensor, b: Tensor, kind: str = "squared_euclidean") -> Tensor:
    """Row-wise distance between two [b x d] embedding batches."""
    if kind == "squared_euclidean":
        return T.squared_distance(a, b)
    if kind == "euclidean":
        return T.sqrt(T.add(T.squared_distance(a, b), 1e-12))
    if kind == "cosine_distance":
        sims = T.sum(T.mul(T.l2_normalize(a), T.l2_normalize(b)), axis=1)
        return T.sub(1.0, sims)
    raise ValueError(f"unknown distance {kind!r}")


def triplet_margin(a: Tensor, p: Tensor, n: Tensor, config: TripletLossConfig = TripletLossConfig()) -> Tensor:
    """Per-row ``D(a,p) - D(a,n) + margin`` before the hinge."""
    if not (a.shape == p.shape == n.shape) or a.ndim != 2:
        raise DimensionError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    return T.add(T.sub(distance(a, p, config.distance), distance(a, n, config.distance)), config.margin)


def triplet_loss(a: Tensor, p: Tensor, n: Tensor, config: TripletLossConfig = TripletLossConfig()) -> Tensor:
    """Mean over the batch of ``max(0, D(a,p) - D(a,n) + margin)``."""
    return T.mean(T.relu(triplet_margin(a, p, n, config)))


def triplet_attack_objective(a: Tensor, p: Tensor, n: Tensor, config: TripletLossConfig = TripletLossConfig()) -> Tensor:
    """Triplet loss without the hinge, used as a PGD objective.

    The hinge is flat on every satisfied triplet, so maximising it from a
    clean point gives a zero gradient there; the un-hinged margin has the same
    ascent direction wherever the hinge is active.
    """
    return T.mean(triplet_margin(a, p, n, config))
