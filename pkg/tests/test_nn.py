import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpbitfit import tensor as tn
from dpbitfit.errors import ConfigurationError, DimensionError, InputError
from dpbitfit.nn import (Conv2d, LayerNorm, Linear, MeanPool, Network, ReLU, build_network, checkpoint_bytes,
                         count_params, forward, inference, layernorm_forward, load_checkpoint, loss_softmax_ce,
                         parse_checkpoint, save_checkpoint)
from helpers import expected_cache_bytes, random_net


def test_parameter_shapes_and_flags():
    lin, conv, ln, relu = Linear(3, 4), Conv2d(2, 5, 3), LayerNorm(6), ReLU()
    assert lin.weight.shape == (3, 4) and lin.bias.shape == (4,)
    assert conv.weight.shape == (18, 5) and conv.bias.shape == (5,)
    assert ln.weight.shape == (6,) and ln.bias.shape == (6,)
    assert not relu.parametric and not relu.weight_trainable and not relu.bias_trainable
    nobias = Linear(3, 4, use_bias=False)
    assert nobias.bias is None and not nobias.bias_trainable


def test_modes():
    net = Network([Linear(3, 4), ReLU(), LayerNorm(4), Linear(4, 2)])
    net.set_mode("bitfit")
    assert all(not l.weight_trainable for l in net.layers)
    assert all(l.bias_trainable for l in net.layers if l.bias is not None)
    net.set_mode("linear_probe")
    assert net.trainable_names() == ["layer3.weight", "layer3.bias"]
    net.set_mode("full")
    assert net.trainable_names() == ["layer0.weight", "layer0.bias", "layer2.weight", "layer2.bias",
                                     "layer3.weight", "layer3.bias"]
    with pytest.raises(ConfigurationError):
        net.set_mode("lora")


def test_identity_linear():
    net = Network([Linear(2, 2, weight=np.eye(2), bias=np.zeros(2))])
    np.testing.assert_array_equal(inference(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_layernorm_examples():
    out = inference(Network([LayerNorm(2)]), np.array([[3.0, 5.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-3)
    assert np.all(layernorm_forward(np.full((1, 2, 4), 3.0), np.ones(4), np.zeros(4)) == 0)
    np.testing.assert_array_equal(layernorm_forward(np.random.default_rng(0).standard_normal((2, 3, 4)),
                                                    np.zeros(4), np.full(4, 7.0)), np.full((2, 3, 4), 7.0))
    x = np.random.default_rng(1).standard_normal((3, 5, 16)) * 4 + 2
    xhat = layernorm_forward(x, np.ones(16), np.zeros(16))
    assert np.max(np.abs(xhat.mean(axis=-1))) < 1e-12
    assert np.max(np.abs(xhat.var(axis=-1) - 1)) < 1e-4


def test_forward_dimension_error_names_layer():
    net = Network([Linear(3, 4), ReLU(), Linear(5, 2)])
    with pytest.raises(DimensionError, match="layer 2"):
        inference(net, np.zeros((1, 3)))


def test_bitfit_forward_is_activation_free_and_outputs_match():
    rng = np.random.default_rng(2)
    for _ in range(20):
        net, x, y = random_net(rng)
        full_out = inference(net, x)
        net.set_mode("bitfit")
        ledger = tn.AllocationLedger()
        with ledger.active():
            trace = forward(net, x)
        assert ledger.tagged_totals["activation-cache"] == 0
        assert all(r.activation_cache is None for r in trace.records)
        assert trace.output.tobytes() == full_out.tobytes()


def test_cache_present_iff_weight_trainable():
    rng = np.random.default_rng(3)
    for _ in range(20):
        net, x, _ = random_net(rng)
        net.set_mode("linear_probe")
        trace = forward(net, x)
        for layer, rec in zip(net.layers, trace.records):
            assert (rec.activation_cache is not None) == bool(layer.weight_trainable)
        net.set_mode("full")
        ledger = tn.AllocationLedger()
        with ledger.active():
            forward(net, x)
        assert ledger.tagged_totals["activation-cache"] == expected_cache_bytes(net, x)


@settings(max_examples=30, deadline=None)
@given(C=st.integers(1, 3), co=st.integers(1, 3), H=st.integers(3, 8), W=st.integers(3, 8), k=st.integers(1, 3),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**16))
def test_conv_forward_matches_loops(C, co, H, W, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((co, C, k, k))
    b = rng.standard_normal(co)
    conv = Conv2d(C, co, k, stride, pad, weight=K.reshape(co, -1).T, bias=b)
    x = rng.standard_normal((2, C, H, W))
    out = inference(Network([conv]), x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = out.shape[2:]
    for n in range(2):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    ref = np.sum(xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k] * K[o]) + b[o]
                    assert abs(out[n, o, i, j] - ref) <= 1e-10


def test_count_params():
    assert count_params(Network([Linear(7, 3)])).fraction == pytest.approx(1 / 8)
    assert count_params(Network([Linear(999, 10)])).fraction == pytest.approx(0.001, abs=1e-15)
    pc = count_params(Network([Linear(100, 50), ReLU(), Linear(50, 10)]))
    assert (pc.total, pc.bias) == (5560, 60)
    assert pc.fraction == pytest.approx(60 / 5560)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        empty = count_params(Network([ReLU()]))
    assert empty.empty and empty.fraction == 0.0 and w


def test_loss_examples():
    res = loss_softmax_ce(np.zeros((3, 2)), [0, 1, 1])
    np.testing.assert_allclose(res.per_sample_loss, np.log(2.0))
    logits = np.random.default_rng(4).standard_normal((3, 4))
    labels = np.array([0, 3, 2])
    res = loss_softmax_ce(logits, labels)
    assert np.max(np.abs(res.dlogits.sum(axis=1))) < 1e-15
    h = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        p, m = logits.copy(), logits.copy()
        p[idx] += h
        m[idx] -= h
        num[idx] = (loss_softmax_ce(p, labels).loss - loss_softmax_ce(m, labels).loss) / (2 * h)
    assert np.max(np.abs(num - res.dlogits) / np.maximum(1, np.abs(num))) <= 1e-7
    with pytest.raises(InputError):
        loss_softmax_ce(logits, [0, 4, 1])


def test_checkpoint_round_trip(tmp_path):
    net = build_network([{"type": "conv2d", "in": 2, "out": 3, "kernel": 2}, {"type": "flatten"},
                         {"type": "layernorm", "p": 12}, {"type": "linear", "in": 12, "out": 2}], seed=5)
    blob = checkpoint_bytes(net)
    assert blob[:4] == b"DPBF"
    state = parse_checkpoint(blob)
    for name, arr in net.parameters().items():
        assert state[name].tobytes() == arr.tobytes() and state[name].shape == arr.shape
    save_checkpoint(net, tmp_path / "c.dpbf")
    other = build_network([{"type": "conv2d", "in": 2, "out": 3, "kernel": 2}, {"type": "flatten"},
                           {"type": "layernorm", "p": 12}, {"type": "linear", "in": 12, "out": 2}], seed=6)
    other.load_state(load_checkpoint(tmp_path / "c.dpbf"))
    assert checkpoint_bytes(other) == blob


def test_meanpool_and_rank3_linear():
    x = np.random.default_rng(7).standard_normal((2, 5, 3))
    net = Network([Linear(3, 4), MeanPool()])
    net.layers[0].weight = np.random.default_rng(8).standard_normal((3, 4))
    np.testing.assert_allclose(inference(net, x), (x @ net.layers[0].weight).mean(axis=1), atol=1e-14)
