"""Private gradient assembly: Poisson batches, clipping factors, noise.

``dp_bitfit_step`` is the bias-only algorithm: one activation-free forward,
one backward in which each layer reduces its output gradient over T to get
``B x p`` per-sample bias gradients, then norms, factors, a weighted sum
and Gaussian noise. ``dp_full_step`` does the same for every trainable
parameter with one of three norm strategies (``opacus``, ``ghost``,
``mixed``); the latter two run a second, reweighted backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .autograd import collect_grads, reweighted_backward
from .errors import InternalError, ParameterError, PolicyError
from .nn import Network, forward
from .timing import NULL_TIMER

CLIPPING_KINDS = ("abadi", "autos", "noclip")
STRATEGIES = ("opacus", "ghost", "mixed")


@dataclass(frozen=True)
class ClippingFn:
    kind: str = "autos"
    R: float = 1.0
    gamma: float = 0.01

    def __post_init__(self):
        if self.kind not in CLIPPING_KINDS:
            raise ParameterError(f"unknown clipping kind {self.kind!r}; expected one of {CLIPPING_KINDS}")
        if not self.R > 0:
            raise ParameterError(f"clipping threshold must be positive, got {self.R}")
        if self.kind == "autos" and not self.gamma > 0:
            raise ParameterError(f"AUTO-S stability constant must be positive, got {self.gamma}")


@dataclass(frozen=True)
class PrivacySpec:
    q: float
    sigma: float
    clipping: ClippingFn = ClippingFn()
    steps: int = 1
    nonprivate_ok: bool = False

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ParameterError(f"sampling rate q must lie in (0, 1], got {self.q}")
        if not self.sigma >= 0:
            raise ParameterError(f"noise multiplier must be non-negative, got {self.sigma}")
        if self.steps < 1:
            raise ParameterError(f"steps must be positive, got {self.steps}")
        if self.clipping.kind == "noclip" and self.sigma > 0 and not self.nonprivate_ok:
            raise PolicyError("NoClip has unbounded sensitivity; use sigma=0 or set nonprivate_ok")


def poisson_sample(n: int, q: float, rng: tn.SeededRng) -> np.ndarray:
    """Ascending indices, each kept independently with probability ``q``."""
    if n < 1 or not 0 < q <= 1:
        raise ParameterError(f"poisson_sample needs n >= 1 and q in (0, 1], got n={n}, q={q}")
    return np.flatnonzero(rng.uniform(n) < q)


def clip_factor(norm, fn: ClippingFn):
    """Per-sample factor ``C(norm)`` with ``C(x) * x <= R`` for the clipping kinds."""
    norm = np.asarray(norm, dtype=np.float64)
    if np.any(norm < 0) or np.any(np.isnan(norm)):
        raise InternalError("clip_factor received a negative or NaN norm")
    if fn.kind == "noclip":
        out = np.ones_like(norm)
    elif fn.kind == "autos":
        out = fn.R / (norm + fn.gamma)
    else:
        # R/0 or R/subnormal is inf and clamps to 1
        with np.errstate(divide="ignore", over="ignore"):
            out = np.minimum(fn.R / norm, 1.0)
    return float(out) if out.ndim == 0 else out


def aggregate_norm(per_layer_norm_sq) -> np.ndarray:
    """``sqrt(sum_l ||g_{l,i}||^2)`` for every sample i."""
    terms = [np.asarray(t, dtype=np.float64) for t in per_layer_norm_sq]
    if not terms:
        raise ParameterError("aggregate_norm needs at least one layer")
    total = terms[0].copy()
    for t in terms[1:]:
        total += t
    return np.sqrt(total)


def noisy_sum(clipped_sum: dict[str, np.ndarray], sigma: float, R: float, rng: tn.SeededRng) -> dict[str, np.ndarray]:
    """Add ``N(0, (sigma R)^2)`` to every entry, parameter by parameter in dict order."""
    if sigma < 0 or R < 0:
        raise ParameterError("sigma and R must be non-negative")
    std = sigma * R
    if std == 0:
        return {k: v.copy() for k, v in clipped_sum.items()}
    return {k: v + tn.gaussian(v.shape, std, rng) for k, v in clipped_sum.items()}


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    clipped_sum: dict[str, np.ndarray]
    norms: np.ndarray
    factors: np.ndarray
    loss: float
    batch_size: int


def _empty_step(net: Network, spec: PrivacySpec, rng, timer) -> StepResult:
    params = net.parameters()
    zeros = {k: np.zeros_like(params[k]) for k in net.trainable_names()}
    with timer.phase("dp-overhead"):
        noised = noisy_sum(zeros, spec.sigma, spec.clipping.R, rng)
    return StepResult(noised, zeros, np.zeros(0), np.zeros(0), 0.0, 0)


def _weighted_sum(factors: np.ndarray, per_sample: np.ndarray) -> np.ndarray:
    # factors of exactly 1.0 leave values untouched, so NoClip reproduces the batch sum
    return (per_sample * factors.reshape((-1,) + (1,) * (per_sample.ndim - 1))).sum(axis=0)


def dp_bitfit_step(net: Network, x, y, spec: PrivacySpec, rng: tn.SeededRng, timer=NULL_TIMER) -> StepResult:
    """Private bias gradient from a single activation-free forward/backward."""
    if any(layer.weight_trainable for layer in net.layers):
        raise PolicyError("dp_bitfit_step requires every weight to be frozen (bitfit mode)")
    if not net.trainable_names():
        raise PolicyError("network has no trainable bias")
    if len(y) == 0:
        return _empty_step(net, spec, rng, timer)
    report = collect_grads(net, x, y, weights="none", batch=False, timer=timer)
    with timer.phase("dp-overhead"):
        norms = aggregate_norm(report.norm_sq_terms())
        factors = clip_factor(norms, spec.clipping)
        factors = np.atleast_1d(factors)
        clipped = {}
        for i, lg in sorted(report.layers.items()):
            if lg.bias_grad_per_sample is not None:
                clipped[f"layer{i}.bias"] = _weighted_sum(factors, lg.bias_grad_per_sample)
        clipped = {k: clipped[k] for k in net.trainable_names()}
        noised = noisy_sum(clipped, spec.sigma, spec.clipping.R, rng)
    report.release()
    return StepResult(noised, clipped, norms, factors, report.loss, len(y))


def dp_full_step(net: Network, x, y, spec: PrivacySpec, strategy: str, rng: tn.SeededRng,
                 timer=NULL_TIMER) -> StepResult:
    """Private gradient for every trainable parameter (weights included)."""
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not any(layer.weight_trainable for layer in net.layers):
        raise PolicyError("dp_full_step needs at least one trainable weight")
    if len(y) == 0:
        return _empty_step(net, spec, rng, timer)
    names = net.trainable_names()
    if strategy == "opacus":
        report = collect_grads(net, x, y, weights="instantiate", batch=False, timer=timer)
        with timer.phase("dp-overhead"):
            norms = aggregate_norm(report.norm_sq_terms())
            factors = np.atleast_1d(clip_factor(norms, spec.clipping))
            clipped = {}
            for i, lg in report.layers.items():
                if lg.weight_grad_per_sample is not None:
                    clipped[f"layer{i}.weight"] = np.tensordot(factors, lg.weight_grad_per_sample, axes=(0, 0))
                if lg.bias_grad_per_sample is not None:
                    clipped[f"layer{i}.bias"] = _weighted_sum(factors, lg.bias_grad_per_sample)
        report.release()
        loss = report.loss
    else:
        # pass 1: norms only, nothing per-sample survives the layer
        report = collect_grads(net, x, y, weights=strategy, batch=False, keep_bias=False, timer=timer)
        with timer.phase("dp-overhead"):
            norms = aggregate_norm(report.norm_sq_terms())
            factors = np.atleast_1d(clip_factor(norms, spec.clipping))
        # pass 2: gradient of sum_i C_i L_i
        with timer.phase("second-pass"):
            clipped = reweighted_backward(net, x, y, factors)
        loss = report.loss
    clipped = {k: clipped[k] for k in names}
    with timer.phase("dp-overhead"):
        noised = noisy_sum(clipped, spec.sigma, spec.clipping.R, rng)
    return StepResult(noised, clipped, norms, factors, loss, len(y))


def activation_free_forward_bytes(net: Network, x) -> int:
    """Bytes the forward pass would register under ``activation-cache``."""
    ledger = tn.AllocationLedger()
    with ledger.active():
        forward(net, x).release()
    return ledger.tagged_totals["activation-cache"]
