"""Step timing and ledger-peak measurement for each training method.

Memory is what the allocation ledger sees, never OS RSS. Timings follow a
fixed protocol: warmup reps, then the median over measured reps. Besides
whole-step wall time every row carries the time spent in DP-only phases
(norms, clipping, reweighting pass, noise), measured inside the step.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .autograd import batch_grads
from .errors import ConfigurationError
from .nn import Linear, MeanPool, Network, ReLU, initialize
from .privacy import ClippingFn, PrivacySpec, dp_bitfit_step, dp_full_step
from .timing import PhaseTimer

BENCH_METHODS = ("dp_bias", "ghost", "mixed", "nondp_bias", "nondp_full", "opacus")
BENCH_HEADER = ("method", "B", "T", "model_tag", "step_wall_seconds", "dp_overhead_seconds",
                "norm_phase_seconds", "peak_bytes", "activation_cache_bytes", "per_sample_grad_bytes",
                "max_batch", "throughput", "nonfinite")
DP_PHASES = ("norms", "dp-overhead", "second-pass")


@dataclass
class BenchRow:
    method: str
    B: int
    T: int
    model_tag: str
    step_wall_seconds: float
    dp_overhead_seconds: float
    norm_phase_seconds: float
    peak_bytes: int
    activation_cache_bytes: int
    per_sample_grad_bytes: int
    max_batch: int | None = None
    throughput: float | None = None
    nonfinite: bool = False


def _check_method(method: str) -> None:
    if method not in BENCH_METHODS:
        raise ConfigurationError(f"unknown bench method {method!r}; expected one of {BENCH_METHODS}")


def run_step(method: str, net: Network, x, y, rng: tn.SeededRng, timer=None, sigma: float = 1.0,
             clipping: ClippingFn = ClippingFn("autos", 1.0)) -> float:
    """One training step's gradient computation; returns the loss."""
    _check_method(method)
    net.set_mode("bitfit" if method.endswith("_bias") else "full")
    timer = timer or PhaseTimer()
    if method.startswith("nondp"):
        return batch_grads(net, x, y)[1]
    spec = PrivacySpec(q=1.0, sigma=sigma, clipping=clipping)
    if method == "dp_bias":
        return dp_bitfit_step(net, x, y, spec, rng, timer=timer).loss
    return dp_full_step(net, x, y, spec, method, rng, timer=timer).loss


def measure_memory(method: str, net: Network, x, y, seed: int = 0, strict: bool = True) -> tn.AllocationLedger:
    """Run one step under a fresh ledger with parameters and the batch registered."""
    ledger = tn.AllocationLedger(strict=strict)
    with ledger.active():
        tokens = [tn.track(arr, "param") for arr in net.parameters().values()]
        tokens.append(tn.track(x, "input"))
        run_step(method, net, x, y, tn.SeededRng(seed, "bench-noise"))
        for t in tokens:
            tn.untrack(t)
    return ledger


def time_step(method: str, net: Network, x, y, reps: int = 5, warmup: int = 2, seed: int = 0):
    """Median wall time, median DP-phase time, median norm-phase time, any non-finite loss."""
    rng = tn.SeededRng(seed, "bench-noise")
    walls, overheads, norm_times = [], [], []
    nonfinite = False
    for k in range(warmup + reps):
        timer = PhaseTimer()
        t0 = time.perf_counter()
        loss = run_step(method, net, x, y, rng, timer)
        wall = time.perf_counter() - t0
        if not math.isfinite(loss):
            nonfinite = True
        if k >= warmup:
            walls.append(wall)
            overheads.append(sum(timer.seconds[p] for p in DP_PHASES) if method.startswith("dp") or
                             method in ("opacus", "ghost", "mixed") else 0.0)
            norm_times.append(timer.seconds["norms"])
    return float(np.median(walls)), float(np.median(overheads)), float(np.median(norm_times)), nonfinite


def scaling_network(d: int, p: int, seed: int = 0) -> Network:
    net = Network([Linear(d, p), MeanPool()])
    return initialize(net, tn.SeededRng(seed, "init"))


def mlp_network(d_in: int, width: int, classes: int, seed: int = 0) -> Network:
    net = Network([Linear(d_in, width), ReLU(), Linear(width, width), ReLU(), Linear(width, classes), MeanPool()])
    return initialize(net, tn.SeededRng(seed, "init"))


def _batch(B: int, T: int, d: int, classes: int, seed: int):
    rng = tn.SeededRng(seed, "bench-data")
    x = rng.standard_normal(B * T * d).reshape(B, T, d)
    y = rng.integers(0, classes, size=B)
    return x, y


def bench_scaling(methods, T_list, B: int, d: int = 64, p: int = 64, reps: int = 5, warmup: int = 2,
                  seed: int = 0) -> list[BenchRow]:
    """One row per (method, T) on ``Linear(d, p)`` followed by mean pooling."""
    T_list = sorted(set(int(t) for t in T_list))
    if len(T_list) < 2:
        raise ConfigurationError("bench-scaling needs at least two values of T")
    if reps < 5:
        raise ConfigurationError("timing protocol needs at least 5 measured reps")
    rows = []
    for method in sorted(methods):
        _check_method(method)
        for T in T_list:
            net = scaling_network(d, p, seed)
            x, y = _batch(B, T, d, p, seed)
            ledger = measure_memory(method, net, x, y, seed)
            wall, overhead, norm_t, bad = time_step(method, net, x, y, reps, warmup, seed)
            rows.append(BenchRow(method, B, T, f"linear{d}x{p}", wall, overhead, norm_t, ledger.peak_bytes,
                                 ledger.tagged_peak["activation-cache"], ledger.tagged_peak["per-sample-grad"],
                                 nonfinite=bad))
    return rows


def peak_for_batch(method: str, net: Network, B: int, T: int, d_in: int, classes: int, seed: int = 0) -> int:
    x, y = _batch(B, T, d_in, classes, seed)
    return measure_memory(method, net, x, y, seed).peak_bytes


def max_batch_search(fits, cap: int = 1 << 16) -> int:
    """Largest B in [1, cap] with ``fits(B)``, by doubling then bisection; 0 if B=1 fails."""
    if not fits(1):
        return 0
    lo = 1
    while lo * 2 <= cap and fits(lo * 2):
        lo *= 2
    hi = min(lo * 2, cap + 1)  # first size known (or assumed) not to fit
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def bench_models(methods, widths, memory_budget_bytes: int, T: int = 8, d_in: int = 16, classes: int = 10,
                 reps: int = 5, warmup: int = 2, seed: int = 0, cap: int = 1 << 12) -> list[BenchRow]:
    """Largest ledger-feasible batch per (method, width) and the resulting throughput."""
    found = {}
    for width in widths:
        for method in sorted(methods):
            _check_method(method)
            net = mlp_network(d_in, width, classes, seed)
            fits = lambda B: peak_for_batch(method, net, B, T, d_in, classes, seed) <= memory_budget_bytes
            found[(method, width)] = max_batch_search(fits, cap)
    if not any(found.values()):
        raise ConfigurationError(f"no method fits a single sample in {memory_budget_bytes} bytes")
    rows = []
    for method in sorted(methods):
        for width in widths:
            mb = found[(method, width)]
            net = mlp_network(d_in, width, classes, seed)
            if mb == 0:
                rows.append(BenchRow(method, 0, T, f"mlp{width}", math.nan, math.nan, math.nan, 0, 0, 0, 0, 0.0))
                continue
            x, y = _batch(mb, T, d_in, classes, seed)
            ledger = measure_memory(method, net, x, y, seed)
            wall, overhead, norm_t, bad = time_step(method, net, x, y, reps, warmup, seed)
            rows.append(BenchRow(method, mb, T, f"mlp{width}", wall, overhead, norm_t, ledger.peak_bytes,
                                 ledger.tagged_peak["activation-cache"], ledger.tagged_peak["per-sample-grad"],
                                 max_batch=mb, throughput=mb / wall, nonfinite=bad))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        d = asdict(r)
        w.writerow(["" if d[k] is None else (int(d[k]) if isinstance(d[k], bool) else d[k]) for k in BENCH_HEADER])
    return buf.getvalue()
