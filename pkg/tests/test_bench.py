import numpy as np
import pytest

from dpbitfit import bench
from dpbitfit import tensor as tn
from dpbitfit.errors import ConfigurationError

GOLDEN_BENCH_HEADER = ("method,B,T,model_tag,step_wall_seconds,dp_overhead_seconds,norm_phase_seconds,peak_bytes,"
                       "activation_cache_bytes,per_sample_grad_bytes,max_batch,throughput,nonfinite")


def test_scaling_rows_sorted_and_consistent():
    rows = bench.bench_scaling(["opacus", "dp_bias", "nondp_bias"], [16, 4], B=4, d=8, p=8)
    assert [(r.method, r.T) for r in rows] == sorted((r.method, r.T) for r in rows)
    assert len(rows) == 6
    for r in rows:
        assert r.peak_bytes >= r.activation_cache_bytes + r.per_sample_grad_bytes
        assert not r.nonfinite
        if r.method.endswith("_bias"):
            assert r.activation_cache_bytes == 0
        if r.method == "opacus":
            assert r.activation_cache_bytes == 8 * r.B * r.T * 8
    csv = bench.rows_to_csv(rows)
    assert csv.splitlines()[0] == GOLDEN_BENCH_HEADER


def test_scaling_argument_checks():
    with pytest.raises(ConfigurationError):
        bench.bench_scaling(["dp_bias"], [8], B=2)
    with pytest.raises(ConfigurationError):
        bench.bench_scaling(["dp_bias"], [4, 8], B=2, reps=3)
    with pytest.raises(ConfigurationError):
        bench.bench_scaling(["lora"], [4, 8], B=2)


def test_strict_ledger_audit_covers_every_method():
    net = bench.mlp_network(4, 8, 3)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 5, 4)), rng.integers(0, 3, 3)
    for m in bench.BENCH_METHODS:
        ledger = bench.measure_memory(m, net, x, y, strict=True)
        assert ledger.live_bytes == 0
        assert ledger.peak_bytes > 0


def test_max_batch_search_matches_exhaustive():
    net = bench.mlp_network(4, 6, 3)
    for method in ("dp_bias", "opacus", "ghost"):
        for budget in (20_000, 60_000, 150_000):
            fits = lambda B: bench.peak_for_batch(method, net, B, 4, 4, 3) <= budget
            exhaustive = 0
            while exhaustive < 200 and fits(exhaustive + 1):
                exhaustive += 1
            assert bench.max_batch_search(fits, cap=200) == exhaustive


def test_search_with_synthetic_predicate():
    for limit in (0, 1, 2, 3, 7, 64, 100, 1000):
        assert bench.max_batch_search(lambda B: B <= limit, cap=512) == min(limit, 512)


def test_bench_models_bitfit_beats_opacus():
    rows = bench.bench_models(["dp_bias", "opacus"], [8, 32], 400_000, T=4, d_in=4, classes=3)
    by = {(r.method, r.model_tag): r for r in rows}
    for w in (8, 32):
        assert by[("dp_bias", f"mlp{w}")].max_batch > by[("opacus", f"mlp{w}")].max_batch
        assert by[("dp_bias", f"mlp{w}")].throughput > 0
        assert by[("dp_bias", f"mlp{w}")].peak_bytes <= 400_000


def test_bench_models_budget_too_small():
    with pytest.raises(ConfigurationError):
        bench.bench_models(["dp_bias", "opacus"], [8], 100, T=4, d_in=4, classes=3)


def test_strict_mode_rejects_unledgered_cache():
    from dpbitfit.autograd import collect_grads
    from dpbitfit.errors import UnledgeredAllocation
    from dpbitfit.nn import forward

    net = bench.mlp_network(4, 8, 3)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 3, 4)), rng.integers(0, 3, 2)
    trace = forward(net, x)  # built with no ledger active
    ledger = tn.AllocationLedger(strict=True)
    with ledger.active(), pytest.raises(UnledgeredAllocation):
        trace.records[0].require_cache(0)
    with ledger.active():
        collect_grads(net, x, y, weights="ghost").release()
