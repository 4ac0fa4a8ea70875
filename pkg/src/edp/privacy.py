"""Renyi-DP accountant for the subsampled Gaussian mechanism.

The per-step bound at order ``alpha`` is ``log(A_alpha) / (alpha - 1)`` with

    A_alpha = E_{z ~ N(0, s^2)} [((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha]

evaluated exactly: a finite binomial sum for integer orders and the
two-sided erfc series for fractional ones. Totals over ``T`` steps add, and
the conversion to (epsilon, delta) is
``min_alpha T * rdp(alpha) + log(1/delta) / (alpha - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractError

DEFAULT_ORDERS = tuple([1.25 + 0.25 * i for i in range(252)] + list(range(65, 257)))


@dataclass
class PrivacyReport:
    epsilon: float
    delta: float
    sampling_rate: float
    steps: int
    optimal_order: float
    noise_multiplier: float
    order_curve: list = field(default_factory=list)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.epsilon)


def _log_add(a: float, b: float) -> float:
    hi, lo = max(a, b), min(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if b > a:
        raise ArithmeticError("log-space subtraction went negative")
    if a == b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return float(np.log(special.erfcx(x)) - x * x) if x > 0 else math.log(special.erfc(x))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    for i in range(alpha + 1):
        term = (special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
                + i * math.log(q) + (alpha - i) * math.log1p(-q)
                + (i * i - i) / (2.0 * sigma * sigma))
        log_a = _log_add(log_a, float(term))
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # split the integral at z0 where the two mixture components cross
    log_a0 = log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > z0:
            break
    return _log_add(log_a0, log_a1)


def rdp_step(alpha: float, q: float, noise_multiplier: float) -> float:
    """Per-step RDP of the Gaussian mechanism subsampled at rate ``q``.

    Returns ``inf`` when ``noise_multiplier`` is 0.
    """
    if not alpha > 1:
        raise ContractError(f"order must exceed 1, got {alpha}")
    if not 0 < q <= 1:
        raise ContractError(f"sampling rate must lie in (0, 1], got {q}")
    if noise_multiplier < 0:
        raise ContractError(f"noise multiplier must be >= 0, got {noise_multiplier}")
    if noise_multiplier == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * noise_multiplier ** 2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, noise_multiplier, int(alpha))
    else:
        log_a = _log_a_frac(q, noise_multiplier, float(alpha))
    return log_a / (alpha - 1)


def compute_epsilon(noise_multiplier: float, q: float, steps: int, delta: float,
                    orders=DEFAULT_ORDERS) -> PrivacyReport:
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if not 0 < delta < 1:
        raise ContractError(f"delta must lie in (0, 1), got {delta}")
    orders = list(orders)
    if not orders or any(not a > 1 for a in orders):
        raise ContractError("orders must be a non-empty list of values > 1")
    if noise_multiplier == 0:
        return PrivacyReport(math.inf, delta, q, steps, math.nan, noise_multiplier, [])
    curve = [(a, steps * rdp_step(a, q, noise_multiplier)) for a in orders]
    log_inv_delta = math.log(1.0 / delta)
    eps_by_order = [rdp + log_inv_delta / (a - 1) for a, rdp in curve]
    k = int(np.argmin(eps_by_order))
    return PrivacyReport(eps_by_order[k], delta, q, steps, orders[k], noise_multiplier, curve)


def dp_sgd_epsilon(noise_multiplier: float, dataset_size: int, minibatch_size: int, epochs: int,
                   delta: float, orders=DEFAULT_ORDERS) -> PrivacyReport:
    """Accountant for a shuffled-batch DP-SGD run (q = mb/N, drop-last steps)."""
    if minibatch_size > dataset_size:
        raise ContractError("mini-batch larger than the dataset")
    steps = epochs * (dataset_size // minibatch_size)
    return compute_epsilon(noise_multiplier, minibatch_size / dataset_size, steps, delta, orders)
