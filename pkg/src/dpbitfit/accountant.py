"""RDP accounting for the Poisson-subsampled Gaussian mechanism.

Integer orders only. For ``q < 1`` the per-step bound is

    (1/(a-1)) log sum_k binom(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))

evaluated term by term in log space. Composition over steps is additive
and the conversion to (eps, delta) is ``min_a steps*rdp(a) + log(1/delta)/(a-1)``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ParameterError

DEFAULT_ALPHAS = tuple(range(2, 65))


def _logsumexp(xs) -> float:
    m = max(xs)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(x - m) for x in xs))


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_sgm(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP (nats) of the subsampled Gaussian at integer order ``alpha``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if int(alpha) != alpha or alpha < 2:
        raise ParameterError(f"alpha must be an integer >= 2, got {alpha}")
    if not 0 < q <= 1:
        raise ParameterError(f"q must lie in (0, 1], got {q}")
    alpha = int(alpha)
    if q == 1:
        return alpha / (2 * sigma**2)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    terms = [
        _log_binom(alpha, k) + k * log_q + (alpha - k) * log_1mq + k * (k - 1) / (2 * sigma**2)
        for k in range(alpha + 1)
    ]
    return max(_logsumexp(terms), 0.0) / (alpha - 1)


@dataclass(frozen=True)
class RdpCurve:
    alphas: tuple[int, ...]
    eps_rdp: tuple[float, ...]

    def compose(self, k: int) -> "RdpCurve":
        return RdpCurve(self.alphas, tuple(k * e for e in self.eps_rdp))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.alphas != other.alphas:
            raise ParameterError("cannot add RDP curves on different order grids")
        return RdpCurve(self.alphas, tuple(a + b for a, b in zip(self.eps_rdp, other.eps_rdp)))


def rdp_curve(q: float, sigma: float, alphas=DEFAULT_ALPHAS) -> RdpCurve:
    return _rdp_curve(float(q), float(sigma), tuple(int(a) for a in alphas))


@functools.lru_cache(maxsize=256)
def _rdp_curve(q: float, sigma: float, alphas: tuple[int, ...]) -> RdpCurve:
    return RdpCurve(alphas, tuple(rdp_sgm(q, sigma, a) for a in alphas))


@dataclass(frozen=True)
class EpsDelta:
    eps: float
    alpha: int


def to_eps_delta(curve: RdpCurve, steps: int, delta: float) -> EpsDelta:
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if not curve.alphas:
        raise ParameterError("empty RDP curve")
    log_inv_delta = math.log(1 / delta)
    best = EpsDelta(math.inf, curve.alphas[0])
    for a, e in zip(curve.alphas, curve.eps_rdp):
        eps = steps * e + log_inv_delta / (a - 1)
        if eps < best.eps:
            best = EpsDelta(eps, a)
    return best


def epsilon(q: float, sigma: float, steps: int, delta: float, alphas=DEFAULT_ALPHAS) -> EpsDelta:
    if steps == 0:
        return EpsDelta(0.0, int(alphas[0]))
    return to_eps_delta(rdp_curve(q, sigma, alphas), steps, delta)


def calibrate_sigma(target_eps: float, delta: float, q: float, steps: int,
                    bracket=(0.3, 100.0), rtol: float = 1e-3, alphas=DEFAULT_ALPHAS) -> float:
    """Smallest sigma (to relative tolerance ``rtol``) whose epsilon is at most the target."""
    if not target_eps > 0:
        raise ParameterError(f"target epsilon must be positive, got {target_eps}")
    lo, hi = bracket
    if epsilon(q, hi, steps, delta, alphas).eps > target_eps:
        raise CalibrationError(
            f"no sigma in [{lo}, {hi}] reaches eps={target_eps} (q={q}, steps={steps}, delta={delta})"
        )
    if epsilon(q, lo, steps, delta, alphas).eps <= target_eps:
        return lo
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if epsilon(q, mid, steps, delta, alphas).eps <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


class RdpAccountant:
    """Running composition of subsampled-Gaussian steps."""

    def __init__(self, alphas=DEFAULT_ALPHAS):
        self.alphas = tuple(int(a) for a in alphas)
        self._rdp = np.zeros(len(self.alphas))
        self.steps = 0

    def step(self, q: float, sigma: float, count: int = 1) -> None:
        self._rdp = self._rdp + count * np.asarray(rdp_curve(q, sigma, self.alphas).eps_rdp)
        self.steps += count

    def curve(self) -> RdpCurve:
        return RdpCurve(self.alphas, tuple(float(v) for v in self._rdp))

    def get_epsilon(self, delta: float) -> EpsDelta:
        if self.steps == 0:
            return EpsDelta(0.0, self.alphas[0])
        return to_eps_delta(self.curve(), 1, delta)
