"""Training procedures: standard triplet training, triplet adversarial fine-tuning,
contrastive adversarial pre-training (optionally semi-supervised), and SGD.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, check_budget, perturb, pgd
from .augment import AugmentConfig, sample_view
from .dataset import FaceDataset, make_label_mask, sample_partners
from .errors import ConfigError, NumericError, SamplingError
from .losses import (
    ContrastiveLossConfig,
    TripletLossConfig,
    half_swap_pairing,
    nt_xent,
    triplet_attack_objective,
    triplet_loss,
)
from .model import (
    Checkpoint,
    EncoderConfig,
    EncoderParams,
    forward_embed,
    forward_project,
    init_params,
    save_checkpoint,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STAGES = ("standard", "triplet_adversarial", "pretrain")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    attack: AttackConfig = AttackConfig()
    contrastive: ContrastiveLossConfig = ContrastiveLossConfig()
    triplet: TripletLossConfig = TripletLossConfig()
    augment: AugmentConfig = AugmentConfig()
    label_fraction: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("/epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("/batch_size", "must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("/learning_rate", "must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("/momentum", "must lie in [0, 1)")
        if not 0 <= self.label_fraction <= 1:
            raise ConfigError("/label_fraction", "must lie in [0, 1]")
        if self.checkpoint_every < 0:
            raise ConfigError("/checkpoint_every", "must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# Desk-scale schedules; fine-tuning spends a quarter of the baseline's
# adversarial epochs. Pre-training uses smaller batches, a lower rate and a
# sharper temperature: at lr 0.05 and tau 0.5 the adversarial contrastive
# objective stalls near log(2B - 1) on the synthetic data.
STANDARD = TrainConfig(epochs=30, learning_rate=0.05)
PRETRAIN = TrainConfig(epochs=50, batch_size=16, learning_rate=0.01, contrastive=ContrastiveLossConfig(temperature=0.2))
FINETUNE = TrainConfig(epochs=25, learning_rate=0.01)
BASELINE = TrainConfig(epochs=100, learning_rate=0.01)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    wall_ms: float
    sa: float | None = None
    ra: float | None = None
    sra: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[EpochLog] = field(default_factory=list)

    @property
    def params(self) -> EncoderParams:
        return self.checkpoint.params


# ---------------------------------------------------------------------------
# Optimiser


def sgd_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> tuple[EncoderParams, dict[str, np.ndarray]]:
    """Heavy-ball SGD: ``v <- momentum*v + g``, ``p <- p - lr*v`` for every name in ``grads``."""
    new_tensors = dict(params.tensors)
    new_velocity = dict(velocity)
    for name, g in grads.items():
        p = params[name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = velocity.get(name)
        v = g.astype(p.dtype) if v is None else (p.dtype.type(momentum) * v + g).astype(p.dtype)
        new_velocity[name] = v
        new_tensors[name] = Tensor(p - p.dtype.type(lr) * v, requires_grad=True)
    return EncoderParams(params.config, new_tensors), new_velocity


# ---------------------------------------------------------------------------
# Shared loop


StepFn = Callable[[EncoderParams, np.ndarray, np.random.Generator], tuple[float, dict[str, np.ndarray]]]
Evaluator = Callable[[EncoderParams], tuple[float, float, float]]


def _batches(order: np.ndarray, batch_size: int, min_size: int) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _encoder_names(params: EncoderParams) -> list[str]:
    return [k for k in params if k.startswith("enc.")]


def _run(
    ds: FaceDataset,
    config: TrainConfig,
    stage: str,
    step: StepFn,
    params: EncoderParams,
    velocity: dict[str, np.ndarray],
    rng: np.random.Generator,
    start_epoch: int,
    run_dir=None,
    evaluator: Evaluator | None = None,
    min_batch: int = 1,
) -> TrainResult:
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    logs = []

    def snapshot(epoch):
        return Checkpoint(
            config=params.config,
            params=params,
            velocity=velocity,
            rng_state=rng.bit_generator.state,
            seed=config.seed,
            epoch=epoch,
            meta={"stage": stage, "train": config.to_dict()},
        )

    ckpt = snapshot(start_epoch)
    with T.deterministic():
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(ds))
            losses = []
            for batch in _batches(order, config.batch_size, min_batch):
                loss, grads = step(params, batch, rng)
                params, velocity = sgd_step(params, grads, config.learning_rate, config.momentum, velocity)
                losses.append(loss)
            entry = EpochLog(epoch=epoch + 1, loss=float(np.mean(losses)), wall_ms=0.0)
            if not np.isfinite(entry.loss):
                raise NumericError(f"epoch {epoch + 1}: non-finite training loss")
            if evaluator is not None:
                entry.sa, entry.ra, entry.sra = evaluator(params)
            entry.wall_ms = round((time.perf_counter() - t0) * 1000, 3)
            logs.append(entry)
            log.info("%s epoch %d loss %.5f", stage, entry.epoch, entry.loss)
            ckpt = snapshot(epoch + 1)
            if run_dir is not None:
                with open(run_dir / "epochs.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(entry.to_json() + "\n")
                last = epoch + 1 == config.epochs
                periodic = config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0
                if last or periodic:
                    save_checkpoint(ckpt, run_dir / f"epoch_{epoch + 1:05d}.ckpt")
    return TrainResult(ckpt, logs)


def _start(
    ds: FaceDataset,
    config: TrainConfig,
    encoder: EncoderConfig | None,
    init: Checkpoint | None,
    resume: Checkpoint | None,
):
    """Initial (params, velocity, rng, epoch) for a fresh, warm-started or resumed run."""
    if resume is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        return resume.params, dict(resume.velocity), rng, resume.epoch
    rng = np.random.default_rng(config.seed)
    if init is not None:
        params = init.params
    else:
        encoder = encoder or EncoderConfig(input_dim=ds.input_dim)
        params = init_params(encoder, config.seed)
    if params.config.input_dim != ds.input_dim:
        raise ConfigError("/encoder/input_dim", f"model expects {params.config.input_dim} inputs, images have {ds.input_dim}")
    return params, {}, rng, 0


# ---------------------------------------------------------------------------
# Triplet training (standard and adversarial)


def _triplet_step(ds: FaceDataset, config: TrainConfig, adversarial: bool) -> StepFn:
    flat = ds.flat()

    def step(params, anchors, rng):
        pos, neg = sample_partners(ds, anchors, rng)
        x = Tensor(flat[anchors])
        xp = Tensor(flat[pos])
        xn = Tensor(flat[neg])
        names = _encoder_names(params)
        sources = [params[k] for k in names]

        if adversarial:
            zp_fixed = forward_embed(params, xp)
            zn_fixed = forward_embed(params, xn)
            delta = pgd(
                lambda xa: triplet_attack_objective(forward_embed(params, xa, "adversarial"), zp_fixed, zn_fixed, config.triplet),
                x,
                config.attack,
                rng,
            )
            check_budget(x, delta, config.attack.epsilon)
            x_adv = perturb(x, delta)

        # embedding order (positives, negatives, anchors) fixes the gradient
        # accumulation order, so the adversarial loss with delta = 0 reproduces
        # the clean loss bit for bit
        with Tape() as tape:
            zp = forward_embed(params, xp)
            zn = forward_embed(params, xn)
            za = forward_embed(params, x)
            if adversarial:
                za_adv = forward_embed(params, x_adv, "adversarial")
                loss = T.scale(
                    T.add(triplet_loss(za, zp, zn, config.triplet), triplet_loss(za_adv, zp, zn, config.triplet)),
                    0.5,
                )
            else:
                loss = triplet_loss(za, zp, zn, config.triplet)
        grads = tape.gradient(loss, sources)
        return loss.item(), dict(zip(names, grads))

    return step


def _check_triplet_data(ds: FaceDataset) -> None:
    counts = np.bincount(np.unique(ds.labels, return_inverse=True)[1])
    if len(counts) < 2 or counts.min() < 2:
        raise SamplingError("triplet training needs >= 2 identities with >= 2 images each; filter the dataset first")


def train_standard(
    ds: FaceDataset,
    config: TrainConfig = STANDARD,
    encoder: EncoderConfig | None = None,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    run_dir=None,
    evaluator: Evaluator | None = None,
) -> TrainResult:
    """Clean triplet-loss training."""
    _check_triplet_data(ds)
    params, velocity, rng, start = _start(ds, config, encoder, init, resume)
    return _run(ds, config, "standard", _triplet_step(ds, config, adversarial=False), params, velocity, rng, start, run_dir, evaluator)


def finetune_triplet_adversarial(
    ds: FaceDataset,
    config: TrainConfig = FINETUNE,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    run_dir=None,
    evaluator: Evaluator | None = None,
    encoder: EncoderConfig | None = None,
) -> TrainResult:
    """Triplet adversarial training: PGD on the anchor, anchor pair (x, x + delta), averaged triplet losses.

    The projection head of a pre-trained ``init`` is carried along untouched.
    """
    _check_triplet_data(ds)
    if config.epochs == 0 and init is not None and resume is None:
        return TrainResult(init, [])
    params, velocity, rng, start = _start(ds, config, encoder, init, resume)
    return _run(ds, config, "triplet_adversarial", _triplet_step(ds, config, adversarial=True), params, velocity, rng, start, run_dir, evaluator)


def train_triplet_adversarial_baseline(
    ds: FaceDataset,
    config: TrainConfig = BASELINE,
    init: Checkpoint | None = None,
    **kwargs,
) -> TrainResult:
    """Adversarial triplet training from a standard-trained checkpoint (same loop as fine-tuning)."""
    return finetune_triplet_adversarial(ds, config, init=init, **kwargs)


# ---------------------------------------------------------------------------
# Contrastive adversarial pre-training


def _label_stream(seed: int) -> np.random.Generator:
    # independent of the training stream so label masking never shifts other draws
    return np.random.default_rng([seed, 0x1ABE1])


def _pretrain_step(ds: FaceDataset, config: TrainConfig) -> StepFn:
    visible = None
    if config.label_fraction > 0:
        visible = make_label_mask(ds, config.label_fraction, _label_stream(config.seed)).flags
    def step(params, batch, rng):
        views = np.stack([sample_view(ds.images[i], config.augment, rng) for i in batch]).reshape(len(batch), -1)
        x = Tensor(views)
        pairing = half_swap_pairing(len(batch))
        labels = vis = None
        if visible is not None:
            labels = np.concatenate([ds.labels[batch]] * 2)
            vis = np.concatenate([visible[batch]] * 2)

        def contrastive(z_clean, z_adv):
            return nt_xent(T.concat([z_clean, z_adv]), pairing, config.contrastive, labels, vis)

        z_fixed = forward_project(params, forward_embed(params, x))
        delta = pgd(
            lambda xa: contrastive(z_fixed, forward_project(params, forward_embed(params, xa, "adversarial"))),
            x,
            config.attack,
            rng,
        )
        check_budget(x, delta, config.attack.epsilon)
        x_adv = perturb(x, delta)

        names = list(params)
        with Tape() as tape:
            z1 = forward_project(params, forward_embed(params, x))
            z2 = forward_project(params, forward_embed(params, x_adv, "adversarial"))
            loss = contrastive(z1, z2)
        grads = tape.gradient(loss, [params[k] for k in names])
        return loss.item(), dict(zip(names, grads))

    return step


def pretrain_contrastive_adversarial(
    ds: FaceDataset,
    config: TrainConfig = PRETRAIN,
    encoder: EncoderConfig | None = None,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    run_dir=None,
    evaluator: Evaluator | None = None,
) -> TrainResult:
    """Instance-wise adversarial contrastive learning on (view, attacked view) pairs.

    Labels are read only when ``config.label_fraction > 0``; then samples with
    visible labels also treat same-identity rows as positives.
    """
    if config.batch_size < 2:
        raise ConfigError("/train/batch_size", "contrastive pre-training needs batches of at least 2")
    if len(ds) < 2:
        raise SamplingError("contrastive pre-training needs at least 2 images")
    params, velocity, rng, start = _start(ds, config, encoder, init, resume)
    return _run(ds, config, "pretrain", _pretrain_step(ds, config), params, velocity, rng, start, run_dir, evaluator, min_batch=2)


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
