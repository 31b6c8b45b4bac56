"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

One ledger per site. Each ledger has a fixed sampling rate and noise
multiplier, so the cumulative RDP at every order is just
``steps * per_step_rdp``; storing the step count instead of a running sum
keeps composition exactly additive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
DEFAULT_DELTA = 1e-5


class InfinitePrivacyLoss(ValueError):
    """Raised when a step releases data without noise (sigma == 0, q > 0)."""


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(e^x - 1) for x > 0
    return x + np.log(-np.expm1(-x))


def step_rdp(q: float, sigma: float, alpha: int) -> float:
    """RDP at integer order ``alpha`` of one subsampled Gaussian step.

    Evaluates (1/(alpha-1)) * log sum_k C(alpha,k) (1-q)^(alpha-k) q^k
    exp(k(k-1) / (2 sigma^2)). The k=0 and k=1 terms have a zero exponent
    and the binomial weights sum to one, so the sum is written as
    ``1 + sum_{k>=2} w_k (exp(...) - 1)`` and the log taken with log1p,
    which avoids cancellation when q is small.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"noise multiplier must be >= 0, got {sigma}")
    if int(alpha) != alpha or alpha < 2:
        raise ValueError(f"order must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        raise InfinitePrivacyLoss("sigma = 0 with q > 0 gives unbounded privacy loss")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)

    k = np.arange(2, alpha + 1, dtype=np.float64)
    log_w = (
        gammaln(alpha + 1)
        - gammaln(k + 1)
        - gammaln(alpha - k + 1)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
    )
    log_s = logsumexp(log_w + _log_expm1(k * (k - 1) / (2.0 * sigma**2)))
    # log(1 + e^s) without overflow
    log_a = float(np.logaddexp(0.0, log_s))
    return log_a / (alpha - 1)


def rdp_vector(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP over an order grid; +inf everywhere if sigma is 0."""
    try:
        return np.array([step_rdp(q, sigma, a) for a in orders], dtype=np.float64)
    except InfinitePrivacyLoss:
        return np.full(len(orders), np.inf)


def _check_orders(orders) -> tuple[int, ...]:
    orders = tuple(int(a) for a in orders)
    if not orders:
        raise ValueError("order grid is empty")
    if any(a < 2 for a in orders):
        raise ValueError("orders must be integers >= 2")
    if any(b <= a for a, b in zip(orders, orders[1:])):
        raise ValueError("orders must be strictly increasing")
    return orders


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon budget must be > 0, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RdpLedger:
    q: float
    sigma: float
    orders: tuple[int, ...] = DEFAULT_ORDERS
    steps: int = 0
    per_step: np.ndarray = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "orders", _check_orders(self.orders))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.per_step is None:
            object.__setattr__(self, "per_step", rdp_vector(self.q, self.sigma, self.orders))

    @property
    def cumulative_rdp(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(len(self.orders))
        return self.steps * self.per_step


def accumulate(ledger: RdpLedger, n_steps: int = 1) -> RdpLedger:
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if n_steps == 0:
        return ledger
    return replace(ledger, steps=ledger.steps + int(n_steps), per_step=ledger.per_step)


def rdp_to_epsilon(rdp, orders, delta: float) -> tuple[float, int]:
    """Smallest eps = rdp(a) + log(1/delta)/(a-1) over the grid."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = _check_orders(orders)
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (np.asarray(orders, dtype=np.float64) - 1.0)
    if np.isinf(eps).all():
        return math.inf, orders[-1]
    i = int(np.argmin(eps))
    return float(eps[i]), orders[i]


def to_epsilon(ledger: RdpLedger, delta: float = DEFAULT_DELTA) -> tuple[float, int]:
    return rdp_to_epsilon(ledger.cumulative_rdp, ledger.orders, delta)


class BudgetStatus(NamedTuple):
    exhausted: bool
    next_step_exhausts: bool


def budget_exhausted(ledger: RdpLedger, budget: PrivacyBudget) -> BudgetStatus:
    """Whether the ledger has reached the budget, and whether one more step would.

    An infinite epsilon budget is never exhausted.
    """
    if math.isinf(budget.epsilon):
        return BudgetStatus(False, False)
    now, _ = to_epsilon(ledger, budget.delta)
    nxt, _ = to_epsilon(accumulate(ledger, 1), budget.delta)
    return BudgetStatus(now >= budget.epsilon, nxt >= budget.epsilon)


def compute_epsilon(
    q: float,
    sigma: float,
    steps: int,
    delta: float = DEFAULT_DELTA,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> tuple[float, int]:
    """(epsilon, best order) after ``steps`` subsampled Gaussian steps."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps > 0 and sigma == 0 and q > 0:
        raise InfinitePrivacyLoss("sigma = 0 with q > 0 gives unbounded privacy loss")
    return to_epsilon(RdpLedger(q, sigma, tuple(orders), steps), delta)


def ledger_record(site_id: str, ledger: RdpLedger, delta: float) -> dict:
    eps, order = to_epsilon(ledger, delta)
    return {
        "site_id": site_id,
        "q": ledger.q,
        "sigma": ledger.sigma,
        "steps": ledger.steps,
        "delta": delta,
        "epsilon": eps,
        "best_order": order,
    }
