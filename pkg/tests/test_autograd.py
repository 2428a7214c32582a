import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpbitfit import tensor as tn
from dpbitfit.autograd import (backward, batch_grads, collect_grads, ghost_preferred, ghost_weight_norms,
                               layer_per_sample_weight, mixed_weight_norms, per_sample_bias_grads,
                               per_sample_weight_grads, reweighted_backward)
from dpbitfit.errors import DimensionError, ParameterError, PolicyError
from dpbitfit.nn import Linear, Network, forward
from helpers import fd_rel_error, finite_difference, random_net, rel_diff


def test_backward_identity_and_chain_rule():
    net = Network([Linear(2, 2, weight=np.eye(2))])
    G = np.array([[0.3, -1.2]])
    out = backward(net, forward(net, np.array([[1.0, 2.0]])), G)
    np.testing.assert_array_equal(out[0][:, 0, :], G)
    W2 = np.array([[1.0, 2.0], [3.0, 4.0]])
    net = Network([Linear(2, 2, weight=W2), Linear(2, 2, weight=W2)])
    out = backward(net, forward(net, np.array([[1.0, -1.0]])), G)
    np.testing.assert_allclose(out[0][:, 0, :], G @ W2.T, rtol=0, atol=1e-15)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    for _ in range(15):
        net, x, y = random_net(rng)
        grads, _ = batch_grads(net, x, y)
        for name, g in grads.items():
            assert fd_rel_error(g, finite_difference(net, x, y, name, h=1e-6)) <= 1e-6, name


def test_small_per_sample_examples():
    np.testing.assert_array_equal(per_sample_bias_grads(np.ones((1, 4, 2))), [[4.0, 4.0]])
    g = np.random.default_rng(0).standard_normal((3, 1, 5))
    np.testing.assert_array_equal(per_sample_bias_grads(g), g[:, 0])
    np.testing.assert_array_equal(per_sample_weight_grads(np.array([[[3.0]]]), np.array([[[2.0]]])), [[[6.0]]])
    np.testing.assert_array_equal(ghost_weight_norms(np.array([[[2.0]]]), np.array([[[3.0]]])), [36.0])
    a = np.random.default_rng(1).standard_normal((2, 3, 4))
    assert np.all(ghost_weight_norms(a, np.zeros((2, 3, 5))) == 0)
    with pytest.raises(DimensionError):
        ghost_weight_norms(a, np.zeros((2, 4, 5)))
    with pytest.raises(PolicyError, match="activation-free"):
        per_sample_weight_grads(np.zeros((2, 3, 5)), None)


def test_mixed_branch_selection():
    assert ghost_preferred(1, 100, 100)
    assert not ghost_preferred(100, 2, 2)
    assert ghost_preferred(4, 2, 8)  # tie goes to ghost
    rng = np.random.default_rng(2)
    for T, d, p in [(1, 100, 100), (100, 2, 2)]:
        a, g = rng.standard_normal((2, T, d)), rng.standard_normal((2, T, p))
        ref = tn.row_norms_sq(per_sample_weight_grads(g, a))
        assert rel_diff(mixed_weight_norms(a, g), ref) <= 1e-10
        assert rel_diff(ghost_weight_norms(a, g), ref) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(B=st.integers(1, 4), T=st.integers(1, 12), d=st.integers(1, 8), p=st.integers(1, 8), seed=st.integers(0, 2**20))
def test_ghost_equals_instantiated(B, T, d, p, seed):
    rng = np.random.default_rng(seed)
    a, g = rng.standard_normal((B, T, d)), rng.standard_normal((B, T, p))
    ref = tn.row_norms_sq(per_sample_weight_grads(g, a))
    assert rel_diff(ghost_weight_norms(a, g), ref) <= 1e-10
    assert rel_diff(mixed_weight_norms(a, g), ref) <= 1e-10


def test_bias_path_reads_no_activation_cache():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net, x, y = random_net(rng)
        net.set_mode("bitfit")
        report = collect_grads(net, x, y, weights="none")
        assert report.layers and all(lg.bias_grad_per_sample is not None for lg in report.layers.values())
        trace = forward(net, x)
        i = next(i for i, l in enumerate(net.layers) if l.weight is not None)
        with pytest.raises(PolicyError, match="activation-free"):
            layer_per_sample_weight(i, net.layers[i], np.zeros((x.shape[0], 1, 1)), trace.records[i])


def test_per_sample_sum_and_singletons():
    rng = np.random.default_rng(4)
    for _ in range(20):
        net, x, y = random_net(rng)
        report = collect_grads(net, x, y, weights="instantiate")
        for i, lg in report.layers.items():
            for kind, ps in (("weight", lg.weight_grad_per_sample), ("bias", lg.bias_grad_per_sample)):
                name = f"layer{i}.{kind}"
                if ps is None:
                    continue
                assert rel_diff(ps.sum(axis=0), report.batch_grads[name]) <= 1e-10
                for b in range(len(y)):
                    single, _ = batch_grads(net, x[b:b + 1], y[b:b + 1])
                    assert np.max(np.abs(ps[b] - single[name])) <= 1e-12 * max(1.0, np.max(np.abs(single[name])))
            if lg.weight_grad_per_sample is not None:
                assert rel_diff(lg.weight_norm_sq_per_sample, tn.row_norms_sq(lg.weight_grad_per_sample)) <= 1e-10


def test_reweighted_backward():
    rng = np.random.default_rng(5)
    for _ in range(10):
        net, x, y = random_net(rng)
        B = len(y)
        plain, _ = batch_grads(net, x, y)
        ones = reweighted_backward(net, x, y, np.ones(B))
        for k in plain:
            assert np.max(np.abs(ones[k] - plain[k])) <= 1e-12 * max(1.0, np.max(np.abs(plain[k])))
        i = int(rng.integers(B))
        hot = reweighted_backward(net, x, y, np.eye(B)[i])
        single, _ = batch_grads(net, x[i:i + 1], y[i:i + 1])
        for k in single:
            assert np.max(np.abs(hot[k] - single[k])) <= 1e-12 * max(1.0, np.max(np.abs(single[k])))
        c1, c2 = rng.random(B), rng.random(B)
        g1, g2, g12 = (reweighted_backward(net, x, y, c) for c in (c1, c2, c1 + c2))
        for k in g12:
            assert rel_diff(g1[k] + g2[k], g12[k]) <= 1e-10
    with pytest.raises(ParameterError):
        reweighted_backward(net, x, y, np.full(B, np.nan))


def test_backward_releases_output_grads():
    rng = np.random.default_rng(6)
    net, x, y = random_net(rng)
    ledger = tn.AllocationLedger()
    with ledger.active():
        collect_grads(net, x, y, weights="ghost", batch=False).release()
    assert ledger.live_bytes == 0
    assert ledger.tagged_live["output-grad"] == 0 and ledger.tagged_live["activation-cache"] == 0
