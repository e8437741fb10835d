"""Triplet-ranking accuracy on clean (SA), attacked (RA) and combined (SA&RA) pools."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, perturb, pgd
from .dataset import FaceDataset, Triplet, sample_triplets
from .losses import TripletLossConfig, triplet_attack_objective
from .model import EncoderParams, forward_embed
from .tensor import Tensor

Embedder = Callable[[Tensor], Tensor]

VARIANTS = ("attacked_positive", "attacked_anchor")

# Evaluation attacks start from a random point: the self-distance objective
# has zero gradient at delta = 0.
EVAL_ATTACK = AttackConfig(random_start=True)


def embedder(params: EncoderParams, branch: str = "clean") -> Embedder:
    return lambda x: forward_embed(params, x, branch)


def _as_arrays(triplets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(triplets, np.ndarray):
        arr = np.asarray(triplets, dtype=np.intp)
    else:
        arr = np.array([[t.anchor_idx, t.positive_idx, t.negative_idx] for t in triplets], dtype=np.intp).reshape(-1, 3)
    if len(arr) == 0:
        raise ValueError("triplet list is empty")
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _ranked(za: np.ndarray, zp: np.ndarray, zn: np.ndarray) -> np.ndarray:
    dap = ((za - zp) ** 2).sum(axis=1)
    dan = ((za - zn) ** 2).sum(axis=1)
    return dap < dan  # ties count as wrong


def triplet_correct(embed: Embedder, triplets, ds: FaceDataset) -> np.ndarray:
    a, p, n = _as_arrays(triplets)
    flat = ds.flat()
    za, zp, zn = (embed(Tensor(flat[i])).data for i in (a, p, n))
    return _ranked(za, zp, zn)


def triplet_accuracy(embed: Embedder, triplets, ds: FaceDataset) -> float:
    """Fraction of triplets with D(f(a), f(p)) < D(f(a), f(n))."""
    return float(triplet_correct(embed, triplets, ds).mean())


def robust_triplet_correct(
    embed: Embedder,
    triplets,
    ds: FaceDataset,
    attack: AttackConfig = EVAL_ATTACK,
    variant: str = "attacked_positive",
    rng: np.random.Generator | None = None,
    loss_config: TripletLossConfig = TripletLossConfig(),
) -> np.ndarray:
    """Per-triplet correctness after a PGD attack.

    ``attacked_positive`` replaces the positive by ``a + delta`` where delta
    pushes the anchor's own embedding away from itself and toward the
    negative. ``attacked_anchor`` perturbs the anchor against the sampled
    positive and negative instead.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    a, p, n = _as_arrays(triplets)
    flat = ds.flat()
    xa = Tensor(flat[a])
    za = embed(xa)
    zp = embed(Tensor(flat[p]))
    zn = embed(Tensor(flat[n]))
    if rng is None:
        rng = np.random.default_rng(attack.seed)
    if variant == "attacked_positive":
        delta = pgd(lambda x: triplet_attack_objective(za, embed(x), zn, loss_config), xa, attack, rng)
        z_adv = embed(perturb(xa, delta))
        return _ranked(za.data, z_adv.data, zn.data)
    delta = pgd(lambda x: triplet_attack_objective(embed(x), zp, zn, loss_config), xa, attack, rng)
    z_adv = embed(perturb(xa, delta))
    return _ranked(z_adv.data, zp.data, zn.data)


def robust_triplet_accuracy(embed: Embedder, triplets, ds: FaceDataset, attack: AttackConfig = EVAL_ATTACK, **kw) -> float:
    return float(robust_triplet_correct(embed, triplets, ds, attack, **kw).mean())


def combined_accuracy(sa_pool: Sequence[bool], ra_pool: Sequence[bool]) -> float:
    """Accuracy over the union of the clean and perturbed evaluations."""
    sa_pool, ra_pool = np.asarray(sa_pool, bool), np.asarray(ra_pool, bool)
    if sa_pool.size == 0 or ra_pool.size == 0:
        raise ValueError("both evaluation pools must be non-empty")
    return float((sa_pool.sum() + ra_pool.sum()) / (sa_pool.size + ra_pool.size))


@dataclass
class MetricsReport:
    sa: float
    ra: float
    sra: float
    n_triplets: int
    attack: dict
    variant: str = "attacked_positive"
    tags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        rows = [("SA", self.sa), ("RA", self.ra), ("SA&RA", self.sra)]
        return "metric  value\n" + "\n".join(f"{k:<7} {v:.4f}" for k, v in rows) + "\n"


def evaluation_pool(ds: FaceDataset, n_triplets: int = 1000, seed: int = 0) -> list[Triplet]:
    """Fixed seeded triplet pool, reused across models so comparisons are paired."""
    return sample_triplets(ds, n_triplets, np.random.default_rng(seed))


def evaluate(
    params: EncoderParams,
    ds: FaceDataset,
    attack: AttackConfig = EVAL_ATTACK,
    n_triplets: int = 1000,
    seed: int = 0,
    variant: str = "attacked_positive",
    triplets=None,
    tags: dict | None = None,
) -> MetricsReport:
    if triplets is None:
        triplets = evaluation_pool(ds, n_triplets, seed)
    embed = embedder(params)
    with T.deterministic():
        sa_pool = triplet_correct(embed, triplets, ds)
        ra_pool = robust_triplet_correct(embed, triplets, ds, attack, variant=variant)
    return MetricsReport(
        sa=float(sa_pool.mean()),
        ra=float(ra_pool.mean()),
        sra=combined_accuracy(sa_pool, ra_pool),
        n_triplets=len(sa_pool),
        attack=attack.to_dict(),
        variant=variant,
        tags=dict(tags or {}),
    )
