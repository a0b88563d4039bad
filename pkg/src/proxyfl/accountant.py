"""Renyi-DP accounting for composed Poisson-subsampled Gaussian steps."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError

# 1.1 .. 10.9 in steps of 0.1 (1.25 and 1.75 added), then integers 11 .. 64
DEFAULT_ORDERS: Tuple[float, ...] = tuple(sorted(
    {round(1 + x / 10.0, 2) for x in range(1, 100)} | {1.25, 1.75}
    | {float(a) for a in range(11, 65)}))


def _log_a_int(q: float, sigma: float, order: int) -> float:
    """log E_{z~N(0,s^2)}[(mixture/base)^order] by binomial expansion."""
    i = np.arange(order + 1)
    log_binom = gammaln(order + 1) - gammaln(i + 1) - gammaln(order - i + 1)
    terms = log_binom + i * math.log(q) + (order - i) * math.log1p(-q) \
        + (i * i - i) / (2.0 * sigma ** 2)
    return float(logsumexp(terms))


def per_step_rdp(order: float, q: float, sigma: float) -> float:
    """RDP at ``order`` of one subsampled Gaussian step.

    q == 1 is the plain Gaussian mechanism, order / (2 sigma^2). For q < 1
    the integer-order binomial expansion is used; fractional orders are
    rounded UP to the next integer, which can only overstate the cost since
    RDP is nondecreasing in the order.
    """
    if not order > 1:
        raise ConfigError(f"RDP order must exceed 1, got {order}")
    if not 0 <= q <= 1:
        raise ConfigError(f"sampling rate must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise ConfigError(f"noise multiplier must be positive, got {sigma}")
    if q == 0:
        return 0.0
    if q == 1:
        return order / (2.0 * sigma ** 2)
    alpha = int(math.ceil(order))
    return max(_log_a_int(q, sigma, alpha) / (alpha - 1), 0.0)


@lru_cache(maxsize=4096)
def _cached_rdp(order: float, q: float, sigma: float) -> float:
    return per_step_rdp(order, q, sigma)


def _rdp_grid(orders: Tuple[float, ...], q: float, sigma: float) -> np.ndarray:
    if q < 1:
        # fractional orders share the integer bound they round up to
        return np.array([_cached_rdp(float(math.ceil(a)), q, sigma) for a in orders])
    return np.array([a / (2.0 * sigma ** 2) for a in orders])


def rdp_to_epsilon(orders: Sequence[float], rdp: Sequence[float], delta: float,
                   simple: bool = False) -> float:
    """Best (epsilon, delta) over the order grid.

    Default conversion: rdp + log((a-1)/a) - (log delta + log a)/(a-1).
    ``simple=True`` uses rdp + log(1/delta)/(a-1) instead.
    """
    a = np.asarray(orders, dtype=np.float64)
    r = np.asarray(rdp, dtype=np.float64)
    if a.size == 0:
        raise ConfigError("empty RDP order grid")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if simple:
        eps = r + math.log(1.0 / delta) / (a - 1)
    else:
        eps = r + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    return max(float(np.min(eps)), 0.0)


def default_delta(n: int) -> float:
    """1/(10 n) rounded down to a power of ten."""
    return 10.0 ** math.floor(math.log10(1.0 / (10 * n)))


class BudgetStatus(str, enum.Enum):
    WITHIN = "WithinBudget"
    EXHAUSTED = "Exhausted"


@dataclass
class PrivacyLedger:
    sampling_rate: float
    noise_multiplier: float
    delta: float
    budget_epsilon: Optional[float] = None
    steps: int = 0
    orders: Tuple[float, ...] = DEFAULT_ORDERS
    simple_conversion: bool = False

    def __post_init__(self):
        self.orders = tuple(float(a) for a in self.orders)
        if not self.orders:
            raise ConfigError("empty RDP order grid")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError(f"sampling rate must lie in (0, 1], got {self.sampling_rate}")
        if not self.noise_multiplier > 0:
            raise ConfigError("accounting needs a positive noise multiplier")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def per_step(self) -> np.ndarray:
        return _rdp_grid(self.orders, self.sampling_rate, self.noise_multiplier)

    @property
    def accumulated_rdp(self) -> np.ndarray:
        return self.steps * self.per_step

    def advance(self, steps: int = 1) -> None:
        if steps < 0:
            raise ValueError("cannot rewind a privacy ledger")
        self.steps += steps

    def after(self, steps: int) -> "PrivacyLedger":
        """A copy advanced by ``steps``; the original is untouched."""
        return PrivacyLedger(self.sampling_rate, self.noise_multiplier, self.delta,
                             self.budget_epsilon, self.steps + steps, self.orders,
                             self.simple_conversion)

    def epsilon(self) -> float:
        return compose_and_convert(self)

    def report(self) -> dict:
        return {"epsilon": self.epsilon(), "delta": self.delta, "steps": self.steps,
                "sampling_rate": self.sampling_rate, "noise_multiplier": self.noise_multiplier}


def compose_and_convert(ledger: PrivacyLedger) -> float:
    if ledger.steps == 0:
        return 0.0
    return rdp_to_epsilon(ledger.orders, ledger.accumulated_rdp, ledger.delta,
                          simple=ledger.simple_conversion)


def check_budget(ledger: PrivacyLedger) -> BudgetStatus:
    if ledger.budget_epsilon is None:
        return BudgetStatus.WITHIN
    if compose_and_convert(ledger) > ledger.budget_epsilon:
        return BudgetStatus.EXHAUSTED
    return BudgetStatus.WITHIN


def epsilon_for_training(n: int, batch_size: int, sigma: float, delta: float,
                         epochs: int, orders: Sequence[float] = DEFAULT_ORDERS,
                         simple: bool = False) -> float:
    """epsilon after ``epochs`` epochs of ceil(n/batch_size) steps at q = batch_size/n."""
    ledger = PrivacyLedger(batch_size / n, sigma, delta, orders=tuple(orders),
                           simple_conversion=simple)
    ledger.advance(epochs * math.ceil(n / batch_size))
    return ledger.epsilon()
