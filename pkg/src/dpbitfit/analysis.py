"""Per-layer time/space cost model for weight and bias training.

A layer maps ``B x T x d`` to ``B x T x p``; every count is in elementary
operations (time) or stored elements (space). Weight-training methods pay
``4BTpd`` for forward plus output gradients and ``2BTpd`` for the weight
gradient; bias methods pay ``BTp`` for the bias gradient. DP extras:

=============  ==========================  ======================
method         time extra                  space extra
=============  ==========================  ======================
opacus         2BTpd                       Bpd
ghostclip      2BTpd + 2BT^2(p+d)          2BT^2
mixghostclip   2BTpd + min(2BT^2(p+d),     min(2BT^2, 2Bpd)
               2BTpd)
lora           2BT(pr+dr)                  B(pr+dr)
adapter        4BTpr                       2Bpr
dp_bias        3Bp                         Bp
=============  ==========================  ======================
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError
from .nn import Conv2d, Linear, Network, count_params, forward

METHODS = ("nondp_full", "opacus", "ghostclip", "mixghostclip", "lora", "adapter", "nondp_bias", "dp_bias")
WEIGHT_METHODS = METHODS[:6]
TWO_PASS = {"ghostclip", "mixghostclip"}
HOOKED = {"opacus", "ghostclip", "mixghostclip", "lora", "adapter"}


@dataclass(frozen=True)
class LayerDims:
    B: int
    T: int
    p: int
    d: int
    r: int | None = None

    def validate(self, method: str) -> None:
        if method not in METHODS:
            raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
        if min(self.B, self.T, self.p, self.d) < 1:
            raise ParameterError(f"layer dims must be positive: {self}")
        if method in ("lora", "adapter") and (self.r is None or self.r < 1):
            raise ParameterError(f"method {method} needs a positive rank r")


@dataclass(frozen=True)
class CostReport:
    method: str
    forward_and_output_grad_time: int
    train_base_time: int
    train_extra_time: int
    total_time: int
    space_forward: int
    space_train_base: int
    space_extra: int
    space_baseline: int
    space_total: int
    n_backprops: int
    needs_forward_hook: bool


def time_cost(dims: LayerDims, method: str) -> tuple[int, int, int]:
    """``(forward & output grad, base training, DP extra)`` operation counts."""
    dims.validate(method)
    B, T, p, d, r = dims.B, dims.T, dims.p, dims.d, dims.r
    fwd = 4 * B * T * p * d
    if method in ("nondp_bias", "dp_bias"):
        return fwd, B * T * p, 3 * B * p if method == "dp_bias" else 0
    inst = 2 * B * T * p * d
    ghost = 2 * B * T * T * (p + d)
    extra = {
        "nondp_full": 0,
        "opacus": inst,
        "ghostclip": inst + ghost,
        "mixghostclip": inst + min(ghost, inst),
        "lora": 2 * B * T * (p * r + d * r) if r else 0,
        "adapter": 4 * B * T * p * r if r else 0,
    }[method]
    return fwd, inst, extra


def space_cost(dims: LayerDims, method: str) -> tuple[int, int, int]:
    """``(forward, base training, DP extra)`` element counts."""
    dims.validate(method)
    B, T, p, d, r = dims.B, dims.T, dims.p, dims.d, dims.r
    fwd = p * d + B * T * (p + d)
    if method in ("nondp_bias", "dp_bias"):
        return fwd, p, B * p if method == "dp_bias" else 0
    extra = {
        "nondp_full": 0,
        "opacus": B * p * d,
        "ghostclip": 2 * B * T * T,
        "mixghostclip": min(2 * B * T * T, 2 * B * p * d),
        "lora": B * (p * r + d * r) if r else 0,
        "adapter": 2 * B * p * r if r else 0,
    }[method]
    return fwd, B * T * (p + d), extra


def cost_report(dims: LayerDims, method: str) -> CostReport:
    tf, tb, te = time_cost(dims, method)
    sf, sb, se = space_cost(dims, method)
    return CostReport(
        method=method,
        forward_and_output_grad_time=tf,
        train_base_time=tb,
        train_extra_time=te,
        total_time=tf + tb + te,
        space_forward=sf,
        space_train_base=sb,
        space_extra=se,
        space_baseline=sf + sb,
        space_total=sf + sb + se,
        n_backprops=2 if method in TWO_PASS else 1,
        needs_forward_hook=method in HOOKED,
    )


def network_ratio(net_dims, method_a: str, method_b: str) -> float:
    """Summed total time of ``method_a`` over that of ``method_b``."""
    net_dims = list(net_dims)
    if not net_dims:
        raise ParameterError("network_ratio needs at least one layer")
    ta = sum(cost_report(l, method_a).total_time for l in net_dims)
    tb = sum(cost_report(l, method_b).total_time for l in net_dims)
    return ta / tb


def dims_from_network(net: Network, B: int, input_shape, r: int | None = None) -> list[tuple[int, LayerDims]]:
    """``(layer_index, LayerDims)`` for every Linear/Conv2d layer given a per-sample input shape."""
    trace = forward(net, np.zeros((1, *input_shape)), grad=False)
    out = []
    for i, (layer, rec) in enumerate(zip(net.layers, trace.records)):
        if isinstance(layer, Linear):
            out.append((i, LayerDims(B, rec.T, layer.p, rec.d, r)))
        elif isinstance(layer, Conv2d):
            out.append((i, LayerDims(B, rec.T, layer.c_out, rec.d, r)))
    return out


def param_report(net: Network) -> dict:
    return asdict(count_params(net))


COMPLEXITY_HEADER = ("method", "layer_index", "B", "T", "p", "d", "r",
                     "time_total", "space_total", "n_backprops", "forward_hook",
                     "time_forward", "time_base", "time_extra", "space_forward", "space_base", "space_extra")


def complexity_rows(indexed_dims, methods=METHODS):
    rows = []
    for method in methods:
        for idx, dims in indexed_dims:
            if method in ("lora", "adapter") and dims.r is None:
                continue
            c = cost_report(dims, method)
            rows.append((method, idx, dims.B, dims.T, dims.p, dims.d, "" if dims.r is None else dims.r,
                         c.total_time, c.space_total, c.n_backprops, int(c.needs_forward_hook),
                         c.forward_and_output_grad_time, c.train_base_time, c.train_extra_time,
                         c.space_forward, c.space_train_base, c.space_extra))
    return rows
