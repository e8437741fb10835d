"""L-inf projected gradient descent on an arbitrary differentiable loss closure."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import AttackError, BudgetError, ConfigError, NumericError
from .tensor import Tape, Tensor

LossOfInput = Callable[[Tensor], Tensor]

BUDGET_SLACK = 1e-7


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 7
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("/epsilon", "must lie in [0, 1]")
        if self.iterations < 0:
            raise ConfigError("/iterations", "must be >= 0")
        if self.iterations > 0 and not self.alpha > 0:
            raise ConfigError("/alpha", "must be > 0 when iterations > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class BudgetAudit:
    """Running record of every perturbation produced while the audit is active."""

    calls: int = 0
    samples: int = 0
    max_excess: float = -np.inf  # max(|delta|) - epsilon
    min_pixel: float = np.inf
    max_pixel: float = -np.inf
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def update(self, x: np.ndarray, delta: np.ndarray, epsilon: float) -> None:
        self.calls += 1
        self.samples += len(x)
        adv = x + delta
        if delta.size:
            self.max_excess = max(self.max_excess, float(np.abs(delta).max()) - epsilon)
            self.min_pixel = min(self.min_pixel, float(adv.min()))
            self.max_pixel = max(self.max_pixel, float(adv.max()))


_audits: list[BudgetAudit] = []


@contextlib.contextmanager
def audit_budget():
    audit = BudgetAudit()
    _audits.append(audit)
    try:
        yield audit
    finally:
        _audits.remove(audit)


def check_budget(x, delta, epsilon: float) -> None:
    """Raise BudgetError unless ``max|delta| <= eps`` and ``x + delta`` lies in [0, 1] (1e-7 slack)."""
    x = np.asarray(getattr(x, "data", x))
    delta = np.asarray(getattr(delta, "data", delta))
    for audit in _audits:
        audit.update(x, delta, epsilon)
    if not delta.size:
        return
    worst = float(np.abs(delta).max())
    adv = x + delta
    problems = []
    if worst > epsilon + BUDGET_SLACK:
        problems.append(f"max|delta|={worst:.9g} exceeds epsilon={epsilon:.9g}")
    if adv.min() < -BUDGET_SLACK or adv.max() > 1 + BUDGET_SLACK:
        problems.append(f"x+delta spans [{adv.min():.9g}, {adv.max():.9g}]")
    if problems:
        for audit in _audits:
            audit.violations.extend(problems)
        raise BudgetError("; ".join(problems))


def perturb(x: Tensor, delta: Tensor) -> Tensor:
    """``x + delta`` clipped to the pixel range; equals ``x`` bitwise when delta is zero."""
    return Tensor(np.clip(x.data + delta.data, 0, 1))


def _project(x: np.ndarray, delta: np.ndarray, eps) -> np.ndarray:
    delta = np.clip(delta, -eps, eps)
    adv = x + delta
    # only re-derive delta where the pixel range binds, so interior steps stay exact
    delta = np.where(adv > 1, 1 - x, delta)
    return np.where(adv < 0, -x, delta)


def pgd(loss_of_input: LossOfInput, x: Tensor, config: AttackConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Maximise ``loss_of_input(x + delta)`` over ``||delta||_inf <= eps`` with signed gradient steps.

    Each iteration steps ``alpha * sign(grad)``, clips delta to the L-inf ball
    and then clips ``x + delta`` to [0, 1]. Model parameters are never
    touched: only the gradient with respect to the input is requested.
    The random start draws from ``rng`` (default: a generator seeded with
    ``config.seed``).
    """
    xd = x.data
    dtype = xd.dtype.type
    eps = dtype(config.epsilon)
    alpha = dtype(config.alpha)
    delta = np.zeros_like(xd)
    if config.epsilon == 0:
        check_budget(xd, delta, config.epsilon)
        return Tensor(delta)
    if config.random_start:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        delta = _project(xd, rng.uniform(-eps, eps, size=xd.shape).astype(xd.dtype), eps)

    for it in range(config.iterations):
        adv = Tensor(np.clip(xd + delta, 0, 1), requires_grad=True)
        try:
            with Tape() as tape:
                loss = loss_of_input(adv)
            (grad,) = tape.gradient(loss, [adv])
        except NumericError as e:
            raise AttackError(f"non-finite loss or gradient: {e}", it) from e
        delta = _project(xd, delta + alpha * np.sign(grad).astype(xd.dtype), eps)

    check_budget(xd, delta, config.epsilon)
    return Tensor(delta)


def fgsm(loss_of_input: LossOfInput, x: Tensor, epsilon: float) -> Tensor:
    """Single signed-gradient step of size epsilon (PGD with one iteration, alpha = epsilon)."""
    if epsilon == 0:
        return pgd(loss_of_input, x, AttackConfig(epsilon=0.0, iterations=0))
    return pgd(loss_of_input, x, AttackConfig(epsilon=epsilon, alpha=epsilon, iterations=1, random_start=False))
