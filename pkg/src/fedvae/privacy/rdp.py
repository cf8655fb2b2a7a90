"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

For sampling rate ``q`` and noise multiplier ``z`` (noise std over
sensitivity), one step has Renyi divergence of order ``alpha``

    eps(alpha) = log(A_alpha) / (alpha - 1),
    A_alpha    = E_{x ~ N(0, z^2)} [((1 - q) + q * exp((2x - 1) / (2 z^2)))^alpha].

Integer orders use the exact binomial expansion of ``A_alpha``; fractional
orders integrate the expectation numerically. Steps compose additively and
the total converts to (eps, delta)-DP by minimising over orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, special

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def _validate(q: float, z: float) -> None:
    if not 0 < q <= 1:
        raise ValueError("sampling probability must be in (0, 1]")
    if not z > 0:
        raise ValueError("noise multiplier must be > 0")


def _log_a_int(q: float, z: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + k * (k - 1) / (2 * z * z)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, z: float, alpha: float) -> float:
    log1mq, logq = math.log1p(-q), math.log(q)
    var = z * z
    log_norm = -0.5 * math.log(2 * math.pi * var)

    def log_integrand(x: float) -> float:
        mix = np.logaddexp(log1mq, logq + (2 * x - 1) / (2 * var))
        return log_norm - x * x / (2 * var) + alpha * mix

    # the integrand is a bump between the two Gaussian means; centre on its log-maximum
    grid = np.linspace(-10 * z, alpha + 10 * z, 2001)
    vals = np.array([log_integrand(x) for x in grid])
    peak_idx = int(vals.argmax())
    peak, shift = float(grid[peak_idx]), float(vals[peak_idx])

    def f(x):
        return math.exp(log_integrand(x) - shift)

    opts = dict(epsabs=0.0, epsrel=1e-12, limit=500)
    left, _ = integrate.quad(f, -np.inf, peak, **opts)
    right, _ = integrate.quad(f, peak, np.inf, **opts)
    return shift + math.log(left + right)


def rdp_step(q: float, z: float, alpha: float) -> float:
    """Per-step RDP of order ``alpha`` of the subsampled Gaussian mechanism."""
    _validate(q, z)
    if not alpha > 1:
        raise ValueError("Renyi order must be > 1")
    if q == 1.0:
        return alpha / (2 * z * z)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, z, int(alpha))
    else:
        log_a = _log_a_frac(q, z, float(alpha))
    return max(log_a / (alpha - 1), 0.0)


@lru_cache(maxsize=256)
def _rdp_vector(q: float, z: float, orders: tuple[float, ...]) -> np.ndarray:
    vec = np.array([rdp_step(q, z, a) for a in orders])
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True)
class RdpAccountant:
    """Accumulated RDP per order for repeated steps of one mechanism."""

    q: float
    z: float
    orders: tuple[float, ...] = DEFAULT_ORDERS
    steps: int = 0
    rdp: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        _validate(self.q, self.z)
        orders = tuple(float(a) for a in self.orders)
        if not orders:
            raise ValueError("order list is empty")
        if any(a <= 1 for a in orders) or list(orders) != sorted(orders):
            raise ValueError("orders must be ascending and > 1")
        object.__setattr__(self, "orders", orders)
        if self.rdp is None:
            object.__setattr__(self, "rdp", np.zeros(len(orders)))

    @property
    def per_step(self) -> np.ndarray:
        return _rdp_vector(self.q, self.z, self.orders)

    def accumulate(self, steps: int = 1) -> "RdpAccountant":
        if steps < 0:
            raise ValueError("steps must be >= 0")
        if steps == 0:
            return self
        return replace(self, steps=self.steps + steps, rdp=self.rdp + steps * self.per_step)

    def epsilon(self, delta: float) -> float:
        return to_epsilon(self, delta)[0]

    def snapshot(self, delta: float | None = None) -> str:
        """Plain-text ``key=value`` dump of the accountant state."""
        lines = [f"q={self.q!r}", f"z={self.z!r}", f"steps={self.steps}",
                 "orders=" + ",".join(repr(a) for a in self.orders),
                 "rdp=" + ",".join(repr(float(v)) for v in self.rdp)]
        if delta is not None:
            eps, order = to_epsilon(self, delta)
            lines += [f"delta={delta!r}", f"epsilon={eps!r}", f"best_order={order!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_snapshot(cls, text: str) -> "RdpAccountant":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        orders = tuple(float(a) for a in kv["orders"].split(","))
        rdp = np.array([float(v) for v in kv["rdp"].split(",")])
        return cls(float(kv["q"]), float(kv["z"]), orders, int(kv["steps"]), rdp)


def accumulate(acct: RdpAccountant, steps: int) -> RdpAccountant:
    return acct.accumulate(steps)


def to_epsilon(acct: RdpAccountant, delta: float) -> tuple[float, float]:
    """Convert accumulated RDP to epsilon at ``delta``; also return the best order."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    orders = np.asarray(acct.orders)
    eps = acct.rdp + math.log(1 / delta) / (orders - 1)
    idx = int(np.argmin(eps))
    return float(eps[idx]), float(orders[idx])


def epsilon_after(q: float, z: float, steps: int, delta: float,
                  orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    return RdpAccountant(q, z, tuple(orders)).accumulate(steps).epsilon(delta)


def steps_until_exceeded(q: float, z: float, budget: PrivacyBudget, max_steps: int = 10**7,
                         orders: Sequence[float] = DEFAULT_ORDERS) -> int:
    """Smallest step count whose epsilon exceeds the budget (monotone bisection)."""
    def over(t):
        return epsilon_after(q, z, t, budget.delta, orders) > budget.epsilon

    if over(0):
        return 0
    hi = 1
    while not over(hi):
        hi *= 2
        if hi > max_steps:
            raise ValueError("budget not exceeded within max_steps")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if over(mid):
            hi = mid
        else:
            lo = mid
    return hi


def basic_composition(budgets: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Sum of epsilons and deltas of sequentially composed mechanisms."""
    eps_total, delta_total = 0.0, 0.0
    for eps, delta in budgets:
        if eps < 0 or not 0 <= delta < 1:
            raise ValueError(f"invalid (epsilon, delta) = ({eps}, {delta})")
        eps_total += eps
        delta_total += delta
    return eps_total, delta_total
