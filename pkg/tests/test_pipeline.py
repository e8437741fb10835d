import json
import math

import numpy as np
import pytest

from robustface.attacks import AttackConfig, audit_budget
from robustface.dataset import FaceDataset, generate_synthetic
from robustface.errors import ConfigError, NumericError, SamplingError
from robustface.model import EncoderConfig, EncoderParams, init_params, load_checkpoint
from robustface.pipeline import (
    STANDARD,
    TrainConfig,
    finetune_triplet_adversarial,
    pretrain_contrastive_adversarial,
    sgd_step,
    train_standard,
    train_triplet_adversarial_baseline,
    with_overrides,
)
from robustface.tensor import Tensor

FAST = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, attack=AttackConfig(iterations=2))
NO_ATTACK = AttackConfig(epsilon=0.0, iterations=0)


def scalar_params(value):
    cfg = EncoderConfig(input_dim=1, hidden_dims=(1,), embed_dim=1, project_dim=1)
    base = init_params(cfg, 0)
    tensors = dict(base.tensors)
    tensors["enc.0.weight"] = Tensor(np.array([[value]], np.float32), requires_grad=True)
    return EncoderParams(cfg, tensors)


# -- optimiser ---------------------------------------------------------------

def test_sgd_single_step():
    p, v = sgd_step(scalar_params(0.0), {"enc.0.weight": np.ones((1, 1), np.float32)}, 0.1, 0.0, {})
    assert p["enc.0.weight"].data[0, 0] == pytest.approx(-0.1, abs=1e-7)
    assert v["enc.0.weight"][0, 0] == 1.0


def test_sgd_zero_rate_keeps_params():
    params = scalar_params(0.7)
    p, _ = sgd_step(params, {"enc.0.weight": np.full((1, 1), 3.0, np.float32)}, 0.0, 0.9, {})
    assert p.equals(params)


def test_sgd_quadratic_bowl():
    params = scalar_params(1.0)
    v = {}
    for _ in range(100):
        w = params["enc.0.weight"].data
        params, v = sgd_step(params, {"enc.0.weight": 2 * w}, 0.1, 0.0, v)
    # (1 - 2*0.1)^100 ~ 2e-10
    assert abs(params["enc.0.weight"].data[0, 0]) < 1e-8


def test_sgd_momentum_accumulates():
    params = scalar_params(0.0)
    g = {"enc.0.weight": np.ones((1, 1), np.float32)}
    params, v = sgd_step(params, g, 0.1, 0.9, {})
    params, v = sgd_step(params, g, 0.1, 0.9, v)
    assert v["enc.0.weight"][0, 0] == pytest.approx(1.9)
    assert params["enc.0.weight"].data[0, 0] == pytest.approx(-0.29)


def test_sgd_rejects_non_finite():
    with pytest.raises(NumericError, match="enc.0.weight"):
        sgd_step(scalar_params(0.0), {"enc.0.weight": np.full((1, 1), np.nan, np.float32)}, 0.1, 0.9, {})


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step(scalar_params(0.0), {"enc.0.weight": np.ones((2, 1), np.float32)}, 0.1, 0.9, {})


def test_config_validation():
    with pytest.raises(ConfigError, match="/epochs"):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError, match="/momentum"):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError, match="/label_fraction"):
        TrainConfig(label_fraction=1.5)


# -- standard training --------------------------------------------------------

def test_standard_zero_rate_keeps_init(tiny_ds, tiny_encoder):
    cfg = with_overrides(FAST, learning_rate=0.0)
    res = train_standard(tiny_ds, cfg, tiny_encoder)
    assert res.params.equals(init_params(tiny_encoder, cfg.seed))
    assert len(res.logs) == 2


def test_standard_deterministic(tiny_ds, tiny_encoder):
    a = train_standard(tiny_ds, FAST, tiny_encoder)
    b = train_standard(tiny_ds, FAST, tiny_encoder)
    assert a.checkpoint == b.checkpoint
    assert [x.loss for x in a.logs] == [x.loss for x in b.logs]


def test_standard_needs_two_identities(tiny_ds, tiny_encoder):
    one = tiny_ds.subset(np.flatnonzero(tiny_ds.labels == 0))
    with pytest.raises(SamplingError):
        train_standard(one, FAST, tiny_encoder)


def test_input_dim_mismatch(tiny_ds):
    with pytest.raises(ConfigError, match="/encoder/input_dim"):
        train_standard(tiny_ds, FAST, EncoderConfig(input_dim=10, hidden_dims=(8,), embed_dim=4, project_dim=2))


@pytest.mark.slow
def test_standard_loss_decreases_on_default_data():
    res = train_standard(generate_synthetic(), STANDARD)
    assert res.logs[-1].loss < res.logs[0].loss


# -- adversarial fine-tuning -------------------------------------------------

def test_zero_budget_finetune_matches_standard(tiny_ds, tiny_encoder):
    cfg = with_overrides(FAST, attack=NO_ATTACK)
    std = train_standard(tiny_ds, cfg, tiny_encoder)
    adv = finetune_triplet_adversarial(tiny_ds, cfg, encoder=tiny_encoder)
    assert adv.params.equals(std.params)
    assert [x.loss for x in adv.logs] == [x.loss for x in std.logs]


def test_zero_budget_finetune_matches_standard_from_init(tiny_ds, tiny_encoder):
    init = train_standard(tiny_ds, FAST, tiny_encoder).checkpoint
    cfg = with_overrides(FAST, attack=NO_ATTACK, seed=4)
    assert finetune_triplet_adversarial(tiny_ds, cfg, init=init).params.equals(train_standard(tiny_ds, cfg, init=init).params)


def test_one_batch_zero_rate_logs_adversarial_loss(tiny_ds, tiny_encoder):
    init = train_standard(tiny_ds, FAST, tiny_encoder).checkpoint
    cfg = TrainConfig(epochs=1, batch_size=len(tiny_ds), learning_rate=0.0, attack=AttackConfig(iterations=3))
    res = finetune_triplet_adversarial(tiny_ds, cfg, init=init)
    assert res.params.equals(init.params)
    assert len(res.logs) == 1 and res.logs[0].loss > 0


def test_adversarial_examples_within_budget(tiny_ds, tiny_encoder):
    with audit_budget() as audit:
        finetune_triplet_adversarial(tiny_ds, FAST, encoder=tiny_encoder)
        pretrain_contrastive_adversarial(tiny_ds, FAST, tiny_encoder)
    assert audit.samples > 0 and audit.ok


def test_baseline_bitwise_equals_finetune(tiny_ds, tiny_encoder):
    init = train_standard(tiny_ds, FAST, tiny_encoder).checkpoint
    a = train_triplet_adversarial_baseline(tiny_ds, FAST, init=init)
    b = finetune_triplet_adversarial(tiny_ds, FAST, init=init)
    assert a.checkpoint == b.checkpoint


def test_zero_epochs_returns_init(tiny_ds, tiny_encoder):
    init = train_standard(tiny_ds, FAST, tiny_encoder).checkpoint
    res = train_triplet_adversarial_baseline(tiny_ds, with_overrides(FAST, epochs=0), init=init)
    assert res.checkpoint is init and res.logs == []


def test_finetune_keeps_projector(tiny_ds, tiny_encoder):
    init = pretrain_contrastive_adversarial(tiny_ds, FAST, tiny_encoder).checkpoint
    res = finetune_triplet_adversarial(tiny_ds, FAST, init=init)
    for name in res.params:
        same = np.array_equal(res.params[name].data, init.params[name].data)
        assert same == name.startswith("proj.")


# -- run directories and resume ----------------------------------------------

def test_run_dir_artifacts(tiny_ds, tiny_encoder, tmp_path):
    cfg = with_overrides(FAST, epochs=4, checkpoint_every=2)
    res = train_standard(tiny_ds, cfg, tiny_encoder, run_dir=tmp_path)
    lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3, 4]
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_00002.ckpt", "epoch_00004.ckpt"]
    assert load_checkpoint(tmp_path / "epoch_00004.ckpt") == res.checkpoint


@pytest.mark.parametrize("stage", ["standard", "finetune", "pretrain"])
def test_resume_matches_uninterrupted(tiny_ds, tiny_encoder, tmp_path, stage):
    fn = {
        "standard": lambda **kw: train_standard(tiny_ds, encoder=tiny_encoder, **kw),
        "finetune": lambda **kw: finetune_triplet_adversarial(tiny_ds, encoder=tiny_encoder, **kw),
        "pretrain": lambda **kw: pretrain_contrastive_adversarial(tiny_ds, encoder=tiny_encoder, **kw),
    }[stage]
    cfg = with_overrides(FAST, epochs=4, checkpoint_every=2)
    full = fn(config=cfg, run_dir=tmp_path / "a")
    mid = load_checkpoint(tmp_path / "a" / "epoch_00002.ckpt")
    resumed = fn(config=cfg, resume=mid)
    assert resumed.checkpoint == full.checkpoint
    assert [x.loss for x in resumed.logs] == [x.loss for x in full.logs[2:]]


# -- contrastive pre-training --------------------------------------------------

def test_pretrain_batch_of_one_rejected(tiny_ds, tiny_encoder):
    with pytest.raises(ConfigError, match="batch_size"):
        pretrain_contrastive_adversarial(tiny_ds, with_overrides(FAST, batch_size=1), tiny_encoder)


def test_pretrain_deterministic(tiny_ds, tiny_encoder):
    a = pretrain_contrastive_adversarial(tiny_ds, FAST, tiny_encoder)
    b = pretrain_contrastive_adversarial(tiny_ds, FAST, tiny_encoder)
    assert a.checkpoint == b.checkpoint


def test_pretrain_ignores_labels_when_unsupervised(tiny_ds, tiny_encoder):
    shuffled = FaceDataset(tiny_ds.images, np.random.default_rng(0).permutation(tiny_ds.labels[::-1]))
    a = pretrain_contrastive_adversarial(tiny_ds, FAST, tiny_encoder)
    b = pretrain_contrastive_adversarial(shuffled, FAST, tiny_encoder)
    assert a.params.equals(b.params)


def test_pretrain_reads_labels_when_semi_supervised(tiny_encoder):
    ds = generate_synthetic(num_identities=2, images_per_identity=8, height=6, width=6, seed=1)
    cfg = with_overrides(FAST, batch_size=16, label_fraction=1.0)
    a = pretrain_contrastive_adversarial(ds, cfg, tiny_encoder)
    b = pretrain_contrastive_adversarial(ds, with_overrides(cfg, label_fraction=0.0), tiny_encoder)
    assert not a.params.equals(b.params)


def test_pretrain_attack_free_loss_bound(tiny_ds, tiny_encoder):
    # identical view pairs: positive similarity is maximal, so each row's loss
    # is at most log(2B - 1)
    cfg = with_overrides(FAST, batch_size=8, attack=NO_ATTACK)
    res = pretrain_contrastive_adversarial(tiny_ds, cfg, tiny_encoder)
    assert all(0 < x.loss <= math.log(2 * 8 - 1) + 1e-5 for x in res.logs)


def test_evaluator_fills_metrics(tiny_ds, tiny_encoder):
    res = train_standard(tiny_ds, with_overrides(FAST, epochs=1), tiny_encoder, evaluator=lambda p: (0.5, 0.25, 0.375))
    assert (res.logs[0].sa, res.logs[0].ra, res.logs[0].sra) == (0.5, 0.25, 0.375)
