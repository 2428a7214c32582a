"""Reverse-mode pass over the layer stack and per-sample gradient pathways.

``backward`` walks the layers from the top, producing the output gradient
``dL/ds_l`` of every parametric layer in the ``B x T x p`` layout and
handing it to a hook before moving on (the hook-per-layer design means no
output gradient outlives its layer). Three ways to get at per-sample
weight information are offered on top of that:

* instantiation: ``a_i^T g_i`` for every sample (``B x d x p``),
* ghost norms: ``<a_i a_i^T, g_i g_i^T>`` from two ``T x T`` Gram matrices,
* mixed: ghost when ``2T^2 <= 2pd`` else instantiation, chosen per layer.

Bias gradients only ever need ``sum_t g``; they never touch activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DimensionError, InternalError, ParameterError, PolicyError
from .nn import Conv2d, Flatten, LayerNorm, Linear, MeanPool, Network, ReLU, forward, loss_softmax_ce
from .timing import NULL_TIMER

WEIGHT_PATHS = ("instantiate", "ghost", "mixed", "none")


def _to_g3(layer, g: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv2d):
        B, p = g.shape[0], g.shape[1]
        return np.ascontiguousarray(g.reshape(B, p, -1).transpose(0, 2, 1))
    return g[:, None, :] if g.ndim == 2 else g


def _input_grad(i: int, layer, g: np.ndarray, g3: np.ndarray, rec) -> np.ndarray:
    if isinstance(layer, Linear):
        return tn.matmul(g3, layer.weight.T).reshape(rec.in_shape)
    if isinstance(layer, Conv2d):
        dcols = tn.matmul(g3, layer.weight.T)
        return tn.fold2d(dcols, rec.in_shape, layer.kernel, layer.stride, layer.padding)
    if isinstance(layer, LayerNorm):
        if rec.norm_stats is None:
            raise InternalError(f"layer {i}: layer-norm statistics missing from trace")
        _, inv_std, xhat = rec.norm_stats
        if xhat is None:
            xhat = rec.activation_cache
        gh = g3 * layer.weight
        dx = inv_std * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx.reshape(rec.in_shape)
    if isinstance(layer, ReLU):
        if rec.mask is None:
            raise InternalError(f"layer {i}: ReLU mask missing from trace")
        return g * rec.mask
    if isinstance(layer, Flatten):
        return g.reshape(rec.in_shape)
    if isinstance(layer, MeanPool):
        T = rec.in_shape[1]
        return np.repeat(g[:, None, :] / T, T, axis=1)
    raise InternalError(f"layer {i}: no backward rule for {type(layer).__name__}")


def backward(net: Network, trace, dlogits: np.ndarray, hook=None, keep: bool = True) -> dict[int, np.ndarray]:
    """Propagate ``dlogits`` down to the lowest layer with trainable parameters.

    ``hook(index, layer, g3, record)`` runs on every parametric layer with its
    output gradient in ``B x T x p`` form. With ``keep=False`` nothing is
    returned and every cache is released right after its layer is done.
    """
    first = trace.first_grad_layer
    out: dict[int, np.ndarray] = {}
    if first is None:
        trace.release()
        return out
    g = tn.as_tensor(dlogits)
    if g.shape != trace.output.shape:
        raise DimensionError(f"output gradient {g.shape} does not match network output {trace.output.shape}")
    tn.untrack(trace.output_token)
    trace.output_token = None
    token = tn.track(g, "output-grad")
    for i in range(len(net.layers) - 1, first - 1, -1):
        layer, rec = net.layers[i], trace.records[i]
        g3 = _to_g3(layer, g) if layer.parametric else None
        g3_token = tn.track(g3, "output-grad") if isinstance(layer, Conv2d) else None
        if g3 is not None:
            if hook is not None:
                hook(i, layer, g3, rec)
            if keep:
                out[i] = g3
        g_next = _input_grad(i, layer, g, g3, rec) if i > first else None
        next_token = tn.track(g_next, "output-grad") if g_next is not None else None
        tn.untrack(token)
        tn.untrack(g3_token)
        if not keep:
            for key in list(rec.tokens):
                rec.drop(key)
        g, token = g_next, next_token
    if not keep:
        trace.release()
    return out


def per_sample_bias_grads(g3: np.ndarray) -> np.ndarray:
    return tn.sum_over_T(g3)


def per_sample_weight_grads(g3: np.ndarray, a3: np.ndarray | None) -> np.ndarray:
    """``out[i] = a_i^T g_i``, shape ``B x d x p``."""
    if a3 is None:
        raise PolicyError("weight gradient requested in activation-free mode")
    if a3.shape[:2] != g3.shape[:2]:
        raise DimensionError(f"activations {a3.shape} and output gradients {g3.shape} disagree on B, T")
    return np.matmul(a3.transpose(0, 2, 1), g3)


def ghost_weight_norms(a3: np.ndarray, g3: np.ndarray) -> np.ndarray:
    """``||a_i^T g_i||_F^2`` via ``<a_i a_i^T, g_i g_i^T>`` without forming ``d x p``."""
    if a3 is None:
        raise PolicyError("ghost norm requested in activation-free mode")
    if a3.shape[:2] != g3.shape[:2]:
        raise DimensionError(f"activations {a3.shape} and output gradients {g3.shape} disagree on B, T")
    aa = np.matmul(a3, a3.transpose(0, 2, 1))
    t1 = tn.track(aa, "ghost-gram")
    gg = np.matmul(g3, g3.transpose(0, 2, 1))
    t2 = tn.track(gg, "ghost-gram")
    out = np.einsum("bij,bij->b", aa, gg)
    tn.untrack(t1)
    tn.untrack(t2)
    return out


def ghost_preferred(T: int, d: int, p: int) -> bool:
    # ties go to the ghost path
    return 2 * T * T <= 2 * p * d


def mixed_weight_norms(a3: np.ndarray, g3: np.ndarray) -> np.ndarray:
    if a3 is None:
        raise PolicyError("weight norm requested in activation-free mode")
    _, T, d = a3.shape
    if ghost_preferred(T, d, g3.shape[2]):
        return ghost_weight_norms(a3, g3)
    ps = per_sample_weight_grads(g3, a3)
    token = tn.track(ps, "per-sample-grad")
    out = tn.row_norms_sq(ps)
    tn.untrack(token)
    return out


# -- layer-level dispatch ------------------------------------------------------

def layer_per_sample_weight(index: int, layer, g3: np.ndarray, rec) -> np.ndarray:
    a = rec.require_cache(index)
    if isinstance(layer, LayerNorm):
        return (a * g3).sum(axis=1)
    return per_sample_weight_grads(g3, a)


def layer_weight_norms(index: int, layer, g3: np.ndarray, rec, path: str) -> np.ndarray:
    a = rec.require_cache(index)
    if isinstance(layer, LayerNorm) or path == "instantiate":
        ps = layer_per_sample_weight(index, layer, g3, rec)
        token = tn.track(ps, "per-sample-grad")
        out = tn.row_norms_sq(ps)
        tn.untrack(token)
        return out
    if path == "ghost":
        return ghost_weight_norms(a, g3)
    if path == "mixed":
        return mixed_weight_norms(a, g3)
    raise ParameterError(f"unknown weight-norm path {path!r}")


def layer_batch_weight_grad(index: int, layer, g3: np.ndarray, rec) -> np.ndarray:
    a = rec.require_cache(index)
    if isinstance(layer, LayerNorm):
        return (a * g3).sum(axis=1).sum(axis=0)
    d, p = a.shape[2], g3.shape[2]
    return a.reshape(-1, d).T @ g3.reshape(-1, p)


def batch_bias_grad(g3: np.ndarray) -> np.ndarray:
    # sum over T first, then over B: the same order the DP path uses
    return per_sample_bias_grads(g3).sum(axis=0)


@dataclass
class LayerGrads:
    bias_grad_per_sample: np.ndarray | None = None
    weight_grad_per_sample: np.ndarray | None = None
    weight_norm_sq_per_sample: np.ndarray | None = None
    bias_norm_sq_per_sample: np.ndarray | None = None


@dataclass
class GradReport:
    layers: dict[int, LayerGrads] = field(default_factory=dict)
    batch_grads: dict[str, np.ndarray] = field(default_factory=dict)
    loss: float = 0.0
    tokens: list = field(default_factory=list)

    def norm_sq_terms(self) -> list[np.ndarray]:
        terms = []
        for lg in self.layers.values():
            for v in (lg.weight_norm_sq_per_sample, lg.bias_norm_sq_per_sample):
                if v is not None:
                    terms.append(v)
        return terms

    def release(self) -> None:
        for t in self.tokens:
            tn.untrack(t)
        self.tokens.clear()


def _ordered(net: Network, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: grads[name] for name in net.trainable_names() if name in grads}


def collect_grads(net: Network, x, y, weights: str = "instantiate", per_sample: bool = True,
                  batch: bool = True, dlogit_scale=None, keep_bias: bool = True,
                  timer=NULL_TIMER) -> GradReport:
    """One forward and one backward, gathering per-sample and/or batch gradients.

    ``weights`` picks how per-sample weight information is obtained:
    ``instantiate`` keeps ``B x d x p`` gradients (and their norms),
    ``ghost``/``mixed`` keep only norms, ``none`` skips weights.
    ``per_sample=False`` disables all per-sample work. Per-sample tensors
    that are kept stay registered until :meth:`GradReport.release`;
    ``keep_bias=False`` drops per-sample bias gradients once their norms are known.
    """
    if weights not in WEIGHT_PATHS:
        raise ParameterError(f"unknown weight path {weights!r}")
    report = GradReport()
    trace = forward(net, x)
    lr = loss_softmax_ce(trace.output, y)
    report.loss = lr.loss
    dl = lr.dlogits
    if dlogit_scale is not None:
        dl = dl * np.asarray(dlogit_scale, dtype=np.float64)[:, None]

    def hook(i, layer, g3, rec):
        lg = LayerGrads()
        if per_sample and layer.bias_trainable:
            ps = per_sample_bias_grads(g3)
            token = tn.track(ps, "per-sample-grad")
            with timer.phase("norms"):
                lg.bias_norm_sq_per_sample = tn.row_norms_sq(ps)
            if keep_bias:
                report.tokens.append(token)
                lg.bias_grad_per_sample = ps
            else:
                tn.untrack(token)
        if per_sample and layer.weight_trainable and weights != "none":
            if weights == "instantiate":
                pw = layer_per_sample_weight(i, layer, g3, rec)
                report.tokens.append(tn.track(pw, "per-sample-grad"))
                lg.weight_grad_per_sample = pw
                with timer.phase("norms"):
                    lg.weight_norm_sq_per_sample = tn.row_norms_sq(pw)
            else:
                with timer.phase("norms"):
                    lg.weight_norm_sq_per_sample = layer_weight_norms(i, layer, g3, rec, weights)
        if per_sample:
            report.layers[i] = lg
        if batch:
            if layer.weight_trainable:
                report.batch_grads[f"layer{i}.weight"] = layer_batch_weight_grad(i, layer, g3, rec)
            if layer.bias_trainable:
                report.batch_grads[f"layer{i}.bias"] = batch_bias_grad(g3)

    backward(net, trace, dl, hook=hook, keep=False)
    report.batch_grads = _ordered(net, report.batch_grads)
    return report


def batch_grads(net: Network, x, y) -> tuple[dict[str, np.ndarray], float]:
    """Ordinary (summed-loss) gradients of every trainable parameter."""
    r = collect_grads(net, x, y, per_sample=False)
    return r.batch_grads, r.loss


def reweighted_backward(net: Network, x, y, C) -> dict[str, np.ndarray]:
    """Gradients of ``sum_i C_i L_i``: a second full pass with reweighted loss rows."""
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (len(y),):
        raise DimensionError(f"expected {len(y)} weights, got shape {C.shape}")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise ParameterError("reweighting factors must be finite and non-negative")
    return collect_grads(net, x, y, per_sample=False, dlogit_scale=C).batch_grads
