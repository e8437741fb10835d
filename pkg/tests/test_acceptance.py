"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

Criteria 6 to 10 share three seeded desk runs on the default synthetic data
(160 training and 40 validation images, 1000 fixed validation triplets).
Every adversarial example generated in this module goes through one budget
audit, which criterion 4 inspects at the end.
"""

import math
import time
from unittest import mock

import numpy as np
import pytest

from robustface import tensor as T
from robustface.attacks import AttackConfig, audit_budget, pgd
from robustface.dataset import generate_synthetic, split_train_val
from robustface.evaluation import evaluate, evaluation_pool
from robustface.losses import (
    ContrastiveLossConfig,
    half_swap_pairing,
    nt_xent,
    positive_weights,
    triplet_loss,
    triplet_margin,
)
from robustface.model import EncoderConfig, EncoderParams, forward_embed, forward_project, init_params, to_bytes
from robustface.pipeline import (
    BASELINE,
    FINETUNE,
    PRETRAIN,
    STANDARD,
    finetune_triplet_adversarial,
    pretrain_contrastive_adversarial,
    train_standard,
    train_triplet_adversarial_baseline,
    with_overrides,
)
from robustface.tensor import Tensor, grad_check

SEEDS = (0, 1, 2)
EPS, ALPHA = 8 / 255, 2 / 255
ZERO_ATTACK = AttackConfig(epsilon=0.0, random_start=True)
GRAD_STEP = 1e-4  # float64 central differences

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module", autouse=True)
def budget_audit():
    with audit_budget() as audit:
        yield audit


# -- shared desk runs ------------------------------------------------------------

def desk_run(seed: int) -> dict:
    ds = generate_synthetic(seed=seed)
    train, val = split_train_val(ds, 0.1, seed=seed)
    pool = evaluation_pool(val, 1000, seed)

    def report(params, attack=None):
        kw = {} if attack is None else {"attack": attack}
        return evaluate(params, val, triplets=pool, **kw)

    t0 = time.perf_counter()
    std = train_standard(train, with_overrides(STANDARD, seed=seed))
    t_std = time.perf_counter() - t0
    base = train_triplet_adversarial_baseline(train, with_overrides(BASELINE, seed=seed), init=std.checkpoint)
    pre = pretrain_contrastive_adversarial(train, with_overrides(PRETRAIN, seed=seed))
    ft = finetune_triplet_adversarial(train, with_overrides(FINETUNE, seed=seed), init=pre.checkpoint)
    t_main = time.perf_counter() - t0
    t1 = time.perf_counter()
    semi_pre = pretrain_contrastive_adversarial(train, with_overrides(PRETRAIN, seed=seed, label_fraction=0.1))
    semi = finetune_triplet_adversarial(train, with_overrides(FINETUNE, seed=seed), init=semi_pre.checkpoint)
    t_semi = time.perf_counter() - t1
    return {
        "checkpoints": {k: r.checkpoint for k, r in (("std", std), ("base", base), ("pre", pre), ("ft", ft), ("semi", semi))},
        "std": report(std.params),
        "std_zero": report(std.params, ZERO_ATTACK),
        "base": report(base.params),
        "ft": report(ft.params),
        "semi": report(semi.params),
        "pre_loss": (pre.logs[0].loss, pre.logs[-1].loss),
        "seconds": {"std": t_std, "main": t_main, "semi": t_semi},
    }


@pytest.fixture(scope="module")
def desk():
    return {seed: desk_run(seed) for seed in SEEDS}


def mean(desk, key, metric):
    return float(np.mean([getattr(desk[s][key], metric) for s in SEEDS]))


def total_seconds(desk, part):
    return sum(desk[s]["seconds"][part] for s in SEEDS)


# -- 1. gradients ----------------------------------------------------------------

def nt_xent_instances(rng):
    for i in range(24):
        pairs = 1 + i % 4
        raw = Tensor(rng.normal(size=(2 * pairs, 6)))
        labels = visible = None
        if i % 2:
            labels = rng.integers(0, 2, size=2 * pairs)
            visible = rng.integers(0, 2, size=2 * pairs)
        cfg = ContrastiveLossConfig(temperature=float(rng.choice([0.1, 0.5, 1.0])))
        pairing = half_swap_pairing(pairs)
        yield lambda r, p=pairing, c=cfg, l=labels, v=visible: nt_xent(T.l2_normalize(r), p, c, l, v), raw


def triplet_instances(rng):
    made = 0
    while made < 24:
        a, p, n = (rng.normal(size=(4, 5)) for _ in range(3))
        unit = lambda z: z / np.linalg.norm(z, axis=1, keepdims=True)
        # keep clear of the hinge so finite differences stay on one side
        if np.abs(triplet_margin(Tensor(unit(a)), Tensor(unit(p)), Tensor(unit(n))).data).min() < 1e-2:
            continue
        made += 1
        yield lambda x, p=p, n=n: triplet_loss(T.l2_normalize(x), T.l2_normalize(Tensor(p)), T.l2_normalize(Tensor(n))), Tensor(a)


def clearances(params, x, branch):
    """Smallest |input| over every ReLU and smallest row norm entering every normalisation."""
    with mock.patch.object(T, "relu", wraps=T.relu) as relu, mock.patch.object(T, "l2_normalize", wraps=T.l2_normalize) as norm:
        forward_project(params, forward_embed(params, x, branch))
    kink = min(float(np.abs(c.args[0].data).min()) for c in relu.call_args_list)
    rows = min(float(np.linalg.norm(c.args[0].data, axis=1).min()) for c in norm.call_args_list)
    return kink, rows


def encoder_instances(rng):
    made = 0
    while made < 24:
        cfg = EncoderConfig(input_dim=12, hidden_dims=(10, 8), embed_dim=6, project_dim=4, use_dual_norm=bool(made % 2))
        params = init_params(cfg, seed=int(rng.integers(2**31)))
        x = Tensor(rng.uniform(0.05, 0.95, size=(3, 12)))
        branch = "adversarial" if made % 4 == 1 else "clean"
        # finite differences must not straddle a ReLU kink or sit near the
        # singular point of normalisation at zero
        kink, rows = clearances(params, x, branch)
        if kink < 0.02 or rows < 0.1:
            continue
        target = rng.normal(size=(3, 4))
        name = list(params)[made % len(params)]
        made += 1

        def through_weight(w, params=params, cfg=cfg, x=x, target=target, branch=branch, name=name):
            tensors = {k: Tensor(v) for k, v in params.arrays().items()}
            tensors[name] = w
            p = EncoderParams(cfg, tensors)
            return T.sum(T.mul(forward_project(p, forward_embed(p, x, branch)), Tensor(target)))

        def through_input(xi, params=params, target=target, branch=branch):
            p = EncoderParams(params.config, {k: Tensor(v) for k, v in params.arrays().items()})
            return T.sum(T.mul(forward_project(p, forward_embed(p, xi, branch)), Tensor(target)))

        yield through_weight, params[name]
        yield through_input, x


def test_criterion_01_gradients(acceptance_log):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for label, gen in (("nt_xent", nt_xent_instances), ("triplet", triplet_instances), ("encoder", encoder_instances)):
        errors = [grad_check(f, x, step=GRAD_STEP) for f, x in gen(rng)]
        worst[label] = (len(errors), max(errors))
    elapsed = time.perf_counter() - t0
    ok = all(n >= 20 and e <= 1e-3 for n, e in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} {n} checks max rel err {e:.1e}" for k, (n, e) in worst.items())
    assert acceptance_log(1, ok, f"{detail}; {elapsed:.1f}s (limit 30s)")


# -- 2. NT-Xent oracle -----------------------------------------------------------

def nt_xent_double_loop(z, pairing, tau):
    z = np.asarray(z, np.float64)
    total = 0.0
    for i in range(len(z)):
        cos = [float(z[i] @ z[k] / (np.linalg.norm(z[i]) * np.linalg.norm(z[k]))) for k in range(len(z))]
        den = sum(math.exp(cos[k] / tau) for k in range(len(z)) if k != i)
        total += -math.log(math.exp(cos[pairing[i]] / tau) / den)
    return total / len(z)


def test_criterion_02_nt_xent_oracle(acceptance_log):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2, 4, 8):
        for tau in (0.1, 0.5, 1.0):
            for _ in range(5):
                z = rng.normal(size=(n, 16)).astype(np.float32)
                pairing = half_swap_pairing(n // 2)
                got = nt_xent(T.l2_normalize(Tensor(z)), pairing, ContrastiveLossConfig(tau)).item()
                worst = max(worst, abs(got - nt_xent_double_loop(z, pairing, tau)))
    elapsed = time.perf_counter() - t0
    assert acceptance_log(2, worst <= 1e-5 and elapsed < 5, f"max |vectorised - oracle| {worst:.1e} (tol 1e-5); {elapsed:.2f}s (limit 5s)")


# -- 3. PGD on a linear objective --------------------------------------------------

def test_criterion_03_pgd_linear(acceptance_log):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    exact = True
    for _ in range(10):
        x = Tensor(rng.uniform(EPS, 1 - EPS, size=(8, 64)))
        w = rng.normal(size=(8, 64))
        wt = Tensor(w)
        delta = pgd(lambda xi: T.sum(T.mul(xi, wt)), x, AttackConfig(epsilon=EPS, alpha=ALPHA, iterations=7))
        exact &= np.array_equal(delta.data, (np.float32(EPS) * np.sign(w)).astype(np.float32))
    elapsed = time.perf_counter() - t0
    assert acceptance_log(3, exact and elapsed < 1, f"delta == eps*sign(w) exactly on 10 interior batches: {exact}; {elapsed:.3f}s (limit 1s)")


# -- 5. degenerations ----------------------------------------------------------------

def test_criterion_05_degenerations(acceptance_log):
    t0 = time.perf_counter()
    ds = generate_synthetic(seed=0)
    train, val = split_train_val(ds, 0.1, seed=0)
    cfg = with_overrides(STANDARD, attack=AttackConfig(epsilon=0.0))
    std = train_standard(train, cfg)
    adv = finetune_triplet_adversarial(train, cfg)
    bitwise = adv.params.equals(std.params) and [x.loss for x in adv.logs] == [x.loss for x in std.logs]
    ra_zero = evaluate(std.params, val, ZERO_ATTACK, n_triplets=1000, seed=0).ra
    elapsed = time.perf_counter() - t0
    ok = bitwise and ra_zero == 1.0 and elapsed < 120
    assert acceptance_log(5, ok, f"eps=0 fine-tuning bitwise equal to standard: {bitwise}; eps=0 RA {ra_zero:.4f} (expected 1); {elapsed:.1f}s (limit 120s)")


# -- 6 to 10. paired desk runs ---------------------------------------------------------

def test_criterion_06_attacks_hurt(desk, acceptance_log):
    clean = mean(desk, "std_zero", "ra")
    attacked = mean(desk, "std", "ra")
    drop = clean - attacked
    secs = total_seconds(desk, "std")
    ok = drop >= 0.10 and secs < 600
    assert acceptance_log(6, ok, f"standard model eps=0 score {clean:.3f}, attacked RA {attacked:.3f}, drop {drop:.3f} (need >= 0.10); training {secs:.0f}s (limit 600s)")


def test_criterion_07_adversarial_training_helps(desk, acceptance_log):
    std = mean(desk, "std", "ra")
    base = mean(desk, "base", "ra")
    ft = mean(desk, "ft", "ra")
    secs = total_seconds(desk, "main")
    ok = base - std >= 0.15 and ft - std >= 0.15 and secs < 1800
    assert acceptance_log(
        7, ok,
        f"RA standard {std:.3f}, baseline {base:.3f} (+{base - std:.3f}), pretrain+finetune {ft:.3f} (+{ft - std:.3f}); need >= +0.15; {secs:.0f}s (limit 1800s)",
    )


def test_criterion_08_finetuning_efficiency(desk, acceptance_log):
    base = mean(desk, "base", "ra")
    ft = mean(desk, "ft", "ra")
    ratio = FINETUNE.epochs / BASELINE.epochs
    ok = base - ft <= 0.05 and ratio <= 0.25
    assert acceptance_log(8, ok, f"baseline RA {base:.3f} - pretrain+finetune RA {ft:.3f} = {base - ft:.3f} (need <= 0.05); adversarial epoch ratio {ratio:.2f} (need <= 0.25)")


def test_criterion_09_semi_supervision(desk, acceptance_log):
    semi = mean(desk, "semi", "sra")
    unsup = mean(desk, "ft", "sra")
    secs = total_seconds(desk, "semi")
    ok = semi >= unsup and secs < 1800
    assert acceptance_log(9, ok, f"SA&RA label_fraction 0.1 {semi:.4f} vs 0 {unsup:.4f} (need >=); {secs:.0f}s (limit 1800s)")


def test_criterion_10_pretraining_loss_trend(desk, acceptance_log):
    trends = {s: desk[s]["pre_loss"] for s in SEEDS}
    ok = all(last < first for first, last in trends.values())
    detail = ", ".join(f"seed {s} {a:.3f} -> {b:.3f}" for s, (a, b) in trends.items())
    assert acceptance_log(10, ok, f"epoch-1 vs final contrastive loss: {detail}")


# -- 11. determinism ---------------------------------------------------------------------

def test_criterion_11_determinism(desk, acceptance_log):
    again = desk_run(SEEDS[0])
    first = desk[SEEDS[0]]
    same_ckpt = all(to_bytes(first["checkpoints"][k]) == to_bytes(again["checkpoints"][k]) for k in first["checkpoints"])
    same_json = all(first[k].to_json() == again[k].to_json() for k in ("std", "std_zero", "base", "ft", "semi"))
    assert acceptance_log(11, same_ckpt and same_json, f"seed {SEEDS[0]} rerun: checkpoints byte-identical {same_ckpt}, metric JSON identical {same_json}")


# -- 4. budget audit (runs last: covers every attack generated above) ----------------------

def test_criterion_04_budget_audit(budget_audit, acceptance_log):
    a = budget_audit
    ok = a.ok and a.samples > 0 and a.max_excess <= 1e-7 and a.min_pixel >= 0 and a.max_pixel <= 1
    assert acceptance_log(
        4, ok,
        f"{a.calls} attacks on {a.samples} inputs: max(|delta| - eps) {a.max_excess:.1e}, x+delta in [{a.min_pixel:.3f}, {a.max_pixel:.3f}], violations {len(a.violations)}",
    )
