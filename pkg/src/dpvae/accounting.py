"""Renyi-DP accounting for iterated DP-Adam and the VAE-LDP budget.

The per-step bound is the Sampled Gaussian Mechanism (Poisson subsampling
with rate q, noise multiplier z), evaluated in log space: a finite binomial
series for integer orders and the two-sided erfc series for fractional ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

from .errors import ConfigurationError, ParameterError

log = logging.getLogger(__name__)

DEFAULT_ORDERS = tuple(
    [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
    + [float(a) for a in range(5, 64)]
    + [128.0, 256.0, 512.0]
)


def _log_add(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_a_int(q: float, z: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    terms = (
        gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * z * z)
    )
    return float(logsumexp(terms))


def _log_a_frac(q: float, z: float, alpha: float) -> float:
    # A = sum over i of binom(alpha, i) [t0_i e0_i + t1_i e1_i], split at z0
    log_a0 = -math.inf
    log_a1 = -math.inf
    z0 = z * z * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        log_coef = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
        # binom(alpha, i) has max(0, i - floor(alpha) - 1) negative factors
        positive = max(0, i - math.floor(alpha) - 1) % 2 == 0
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        # 0.5 * erfc(x / sqrt(2)) == Phi(-x)
        log_e0 = float(log_ndtr((z0 - i) / z))
        log_e1 = float(log_ndtr((j - z0) / z))
        log_s0 = log_t0 + (i * i - i) / (2.0 * z * z) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * z * z) + log_e1
        if positive:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > alpha:
            break
    return _log_add(log_a0, log_a1)


def subsampled_gaussian_rdp(q: float, z: float, alpha: float) -> float:
    """RDP at order ``alpha`` of one step of the sampled Gaussian mechanism."""
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"sampling rate must lie in (0, 1], got {q}")
    if z == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * z * z)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, z, int(alpha))
    else:
        log_a = _log_a_frac(q, z, float(alpha))
    return log_a / (alpha - 1.0)


def compute_rdp(q: float, z: float, steps: int, orders=DEFAULT_ORDERS) -> np.ndarray:
    return np.array([steps * subsampled_gaussian_rdp(q, z, a) for a in orders])


@dataclass(frozen=True)
class EpsDeltaBudget:
    epsilon: float
    delta: float
    order: float | None = None


@dataclass
class RdpAccountant:
    """Accumulates RDP of ``steps`` sampled-Gaussian steps at every order."""

    sampling_rate: float
    noise_multiplier: float
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    rdp: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ParameterError(f"sampling rate must lie in (0, 1], got {self.sampling_rate}")
        if self.noise_multiplier < 0:
            raise ParameterError("noise multiplier must be non-negative")
        self.orders = tuple(float(a) for a in self.orders)
        if any(a <= 1 for a in self.orders):
            raise ConfigurationError("RDP orders must be > 1")
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))
        self._per_step = None

    @property
    def non_private(self) -> bool:
        return self.noise_multiplier == 0

    def per_step(self) -> np.ndarray:
        if self._per_step is None:
            self._per_step = np.array(
                [subsampled_gaussian_rdp(self.sampling_rate, self.noise_multiplier, a) for a in self.orders]
            )
        return self._per_step

    def accumulate(self, steps: int = 1) -> "RdpAccountant":
        if steps < 0:
            raise ParameterError("steps must be non-negative")
        if self.non_private and steps and self.steps == 0:
            log.warning("noise multiplier is 0: training is not differentially private (epsilon = inf)")
        self.steps += int(steps)
        # recompute from the step count so split accumulation equals one-shot exactly
        self.rdp = self.per_step() * self.steps if self.steps else np.zeros(len(self.orders))
        return self

    def to_eps_delta(self, delta: float) -> EpsDeltaBudget:
        if not self.orders:
            raise ConfigurationError("empty RDP order grid")
        return rdp_to_eps_delta(self.orders, self.rdp, delta)

    def export(self, delta: float) -> dict:
        budget = self.to_eps_delta(delta)
        return {
            "q": self.sampling_rate,
            "z": self.noise_multiplier,
            "T": self.steps,
            "delta": delta,
            "orders": list(self.orders),
            "eps_rdp": [float(v) for v in self.rdp],
            "eps": budget.epsilon,
            "minimizing_alpha": budget.order,
        }


def accumulate_step(acct: RdpAccountant, steps: int = 1) -> RdpAccountant:
    return acct.accumulate(steps)


def rdp_to_eps_delta(orders, rdp, delta: float) -> EpsDeltaBudget:
    """eps = min over orders of rdp(a) + log(1/delta)/(a - 1)."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    if orders.size == 0:
        raise ConfigurationError("empty RDP order grid")
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    if not np.any(np.isfinite(eps)):
        return EpsDeltaBudget(math.inf, delta, None)
    k = int(np.nanargmin(eps))
    return EpsDeltaBudget(float(eps[k]), delta, float(orders[k]))


def to_eps_delta(acct: RdpAccountant, delta: float) -> EpsDeltaBudget:
    return acct.to_eps_delta(delta)


def vae_ldp_sensitivity(latent_dim: int, mean_bound: float = 3.0) -> float:
    """l2 diameter of the box [-bound, bound]^d that the encoder mean lives in."""
    return 2.0 * mean_bound * math.sqrt(latent_dim)


def vae_ldp_epsilon(sigma: float, delta: float, latent_dim: int, mean_bound: float = 3.0) -> float:
    """Budget of one VAE-LDP perturbation: sens * sqrt(2 log(1.25/delta)) / sigma."""
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    if not mean_bound > 0:
        raise ParameterError("mean bound must be positive")
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    sens = vae_ldp_sensitivity(latent_dim, mean_bound)
    return sens * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def default_delta(n_records: int) -> float:
    return 1.0 / n_records
