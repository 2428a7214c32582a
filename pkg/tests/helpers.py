"""Random small networks and finite-difference oracles shared by the tests."""
from __future__ import annotations

import numpy as np

from dpbitfit import tensor as tn
from dpbitfit.nn import Conv2d, Flatten, LayerNorm, Linear, MeanPool, Network, ReLU, forward, loss_softmax_ce


def _randomize(net: Network, rng: np.random.Generator, scale: float = 0.7) -> Network:
    for layer in net.layers:
        if isinstance(layer, LayerNorm):
            layer.weight = 1.0 + 0.3 * rng.standard_normal(layer.p)
            layer.bias = 0.3 * rng.standard_normal(layer.p)
        elif layer.weight is not None:
            layer.weight = scale * rng.standard_normal(layer.weight.shape) / np.sqrt(layer.weight.shape[0])
            if layer.bias is not None:
                layer.bias = 0.3 * rng.standard_normal(layer.bias.shape)
    return net


def random_net(rng: np.random.Generator, max_dim: int = 8, max_batch: int = 4, allow_conv: bool = True,
               max_parametric: int = 3, classes: int | None = None):
    """``(net, x, y)`` with at most ``max_parametric`` layers among Linear, Conv2d and LayerNorm."""
    B = int(rng.integers(1, max_batch + 1))
    n_par = int(rng.integers(1, max_parametric + 1))
    layers = []
    if allow_conv and rng.random() < 0.4:
        c_in = int(rng.integers(1, 4))
        H, W = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, max_dim + 1))
        conv = Conv2d(c_in, c_out, k, stride, pad)
        oh, ow = tn.conv_output_size(H, W, (k, k), (stride, stride), (pad, pad))
        layers += [conv]
        if rng.random() < 0.5:
            layers.append(ReLU())
        layers.append(Flatten())
        width = c_out * oh * ow
        x = rng.standard_normal((B, c_in, H, W))
        rank3 = False
        n_par -= 1
    else:
        T = int(rng.integers(1, 5))
        width = int(rng.integers(1, max_dim + 1))
        rank3 = rng.random() < 0.6
        x = rng.standard_normal((B, T, width) if rank3 else (B, width))
    remaining = n_par
    while remaining > 0:
        last = remaining == 1
        if width > 1 and not last and rng.random() < 0.35:
            layers.append(LayerNorm(width))
        else:
            out = classes if (last and classes) else int(rng.integers(2, max_dim + 1))
            layers.append(Linear(width, out))
            width = out
            if not last and rng.random() < 0.5:
                layers.append(ReLU())
        remaining -= 1
    if not any(isinstance(l, Linear) for l in layers):
        layers.append(Linear(width, classes or 3))
        width = classes or 3
    if rank3:
        layers.append(MeanPool())
    net = _randomize(Network(layers), rng)
    y = rng.integers(0, width, size=B)
    return net, x, y


def loss_at(net: Network, x, y) -> float:
    trace = forward(net, x, grad=False)
    return loss_softmax_ce(trace.output, y).loss


def finite_difference(net: Network, x, y, name: str, h: float = 1e-5) -> np.ndarray:
    """Central differences of the summed loss with respect to one parameter."""
    base = net.parameters()[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        net.set_parameter(name, plus)
        lp = loss_at(net, x, y)
        minus = base.copy()
        minus[idx] -= h
        net.set_parameter(name, minus)
        lm = loss_at(net, x, y)
        grad[idx] = (lp - lm) / (2 * h)
    net.set_parameter(name, base)
    return grad


def fd_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest ``|a - n| / max(1, |a|, |n|)`` over entries."""
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def rel_diff(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / denom)


def expected_cache_bytes(net: Network, x) -> int:
    """``8 * sum_l B * T_l * d_l`` over weight-trainable layers, from shape arithmetic alone."""
    shape = tuple(x.shape)
    B = shape[0]
    total = 0
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            _, C, H, W = shape
            oh, ow = tn.conv_output_size(H, W, layer.kernel, layer.stride, layer.padding)
            T, d = oh * ow, C * layer.kernel[0] * layer.kernel[1]
            out = (B, layer.c_out, oh, ow)
        elif isinstance(layer, (Linear, LayerNorm)):
            T = shape[1] if len(shape) == 3 else 1
            d = shape[-1]
            out = shape[:-1] + ((layer.p,))
        elif isinstance(layer, Flatten):
            out = (B, int(np.prod(shape[1:])))
        elif isinstance(layer, MeanPool):
            out = (B, shape[2])
        else:
            out = shape
        if layer.weight_trainable:
            total += 8 * B * T * d
        shape = out
    return total
