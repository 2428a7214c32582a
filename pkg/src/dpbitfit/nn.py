"""Layers, the network container and the forward pass.

The forward pass only keeps what the backward rules will need: a layer's
input (the activation cache) is stored only when its weight is trainable.
With every weight frozen the forward pass is activation-free; ReLU masks
and layer-norm statistics are kept under their own ledger tags so that the
claim can be checked exactly.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError, InputError, InternalError, ParameterError

LN_EPS = 1e-5
MODES = ("full", "bitfit", "linear_probe", "custom")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


class Layer:
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    weight_trainable = False
    bias_trainable = False

    @property
    def parametric(self) -> bool:
        return self.weight is not None or self.bias is not None

    def params(self):
        if self.weight is not None:
            yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def trainable(self, kind: str) -> bool:
        return self.weight_trainable if kind == "weight" else self.bias_trainable

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"

    def describe(self) -> str:
        return ""


class Linear(Layer):
    """``s = a W + b`` on the last axis; ``W`` is ``d x p``."""

    def __init__(self, d: int, p: int, weight=None, bias=None, use_bias: bool = True):
        self.d, self.p = int(d), int(p)
        self.weight = tn.as_tensor(weight) if weight is not None else np.zeros((self.d, self.p))
        if use_bias:
            self.bias = tn.as_tensor(bias) if bias is not None else np.zeros(self.p)
        if self.weight.shape != (self.d, self.p):
            raise DimensionError(f"Linear weight must be {self.d}x{self.p}, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.p,):
            raise DimensionError(f"Linear bias must have length {self.p}, got {self.bias.shape}")
        self.weight_trainable = True
        self.bias_trainable = self.bias is not None

    @property
    def fan_in(self) -> int:
        return self.d

    def describe(self):
        return f"{self.d}, {self.p}"


class Conv2d(Layer):
    """2-d convolution lowered through :func:`tensor.unfold2d`.

    The weight is stored in lowered form, ``(C_in*kH*kW) x C_out``.
    """

    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0, weight=None, bias=None,
                 use_bias: bool = True):
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.kernel, self.stride, self.padding = _pair(kernel), _pair(stride), _pair(padding)
        d = self.c_in * self.kernel[0] * self.kernel[1]
        self.weight = tn.as_tensor(weight) if weight is not None else np.zeros((d, self.c_out))
        if use_bias:
            self.bias = tn.as_tensor(bias) if bias is not None else np.zeros(self.c_out)
        if self.weight.shape != (d, self.c_out):
            raise DimensionError(f"Conv2d lowered weight must be {d}x{self.c_out}, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise DimensionError(f"Conv2d bias must have length {self.c_out}, got {self.bias.shape}")
        self.weight_trainable = True
        self.bias_trainable = self.bias is not None

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    def describe(self):
        return f"{self.c_in}, {self.c_out}, kernel={self.kernel}, stride={self.stride}, padding={self.padding}"


class LayerNorm(Layer):
    """Per-row normalization over the last axis with population variance."""

    def __init__(self, p: int, weight=None, bias=None):
        self.p = int(p)
        self.weight = tn.as_tensor(weight) if weight is not None else np.ones(self.p)
        self.bias = tn.as_tensor(bias) if bias is not None else np.zeros(self.p)
        if self.weight.shape != (self.p,) or self.bias.shape != (self.p,):
            raise DimensionError(f"LayerNorm parameters must have length {self.p}")
        self.weight_trainable = True
        self.bias_trainable = True

    def describe(self):
        return f"{self.p}"


class ReLU(Layer):
    pass


class Flatten(Layer):
    """Collapse every non-batch axis."""


class MeanPool(Layer):
    """Average ``B x T x p`` over T."""


@dataclass
class ParamCount:
    total: int
    bias: int
    fraction: float
    empty: bool = False


class Network:
    def __init__(self, layers, mode: str = "full"):
        self.layers: list[Layer] = list(layers)
        self.mode = "custom"
        self.set_mode(mode)

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        if mode == "custom":
            return
        last = max((i for i, l in enumerate(self.layers) if l.parametric), default=None)
        for i, layer in enumerate(self.layers):
            has_w, has_b = layer.weight is not None, layer.bias is not None
            if mode == "full":
                layer.weight_trainable, layer.bias_trainable = has_w, has_b
            elif mode == "bitfit":
                layer.weight_trainable, layer.bias_trainable = False, has_b
            else:
                layer.weight_trainable = has_w and i == last
                layer.bias_trainable = has_b and i == last

    def freeze_weights(self) -> list[str]:
        """Freeze every weight; returns the names that were trainable."""
        frozen = [n for n, (layer, kind) in self._slots() if kind == "weight" and layer.weight_trainable]
        for layer in self.layers:
            layer.weight_trainable = False
        self.mode = "bitfit" if all(l.bias_trainable or l.bias is None for l in self.layers) else "custom"
        return frozen

    def _slots(self):
        for i, layer in enumerate(self.layers):
            for kind, _ in layer.params():
                yield f"layer{i}.{kind}", (layer, kind)

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameters in registry order (layer index, weight before bias)."""
        return {name: getattr(layer, kind) for name, (layer, kind) in self._slots()}

    def trainable_names(self) -> list[str]:
        return [name for name, (layer, kind) in self._slots() if layer.trainable(kind)]

    def param_kind(self, name: str) -> str:
        return name.rsplit(".", 1)[1]

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        idx, kind = name.split(".")
        layer = self.layers[int(idx[len("layer"):])]
        old = getattr(layer, kind)
        if old is None or old.shape != value.shape:
            raise DimensionError(f"{name}: cannot assign shape {value.shape}")
        setattr(layer, kind, value)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.set_parameter(name, tn.as_tensor(value))

    def copy(self) -> "Network":
        import copy
        return copy.deepcopy(self)

    def __repr__(self):
        return f"Network(mode={self.mode!r}, layers={self.layers!r})"


def initialize(net: Network, rng: tn.SeededRng) -> Network:
    """Truncated-normal fan-in weights (cut at two std), zero biases, unit norm gains."""
    for layer in net.layers:
        if isinstance(layer, (Linear, Conv2d)):
            std = 1.0 / np.sqrt(layer.fan_in)
            z = rng.standard_normal(layer.weight.size)
            bad = np.abs(z) > 2.0
            while bad.any():
                z[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(z) > 2.0
            layer.weight = (std * z).reshape(layer.weight.shape)
            if layer.bias is not None:
                layer.bias = np.zeros_like(layer.bias)
        elif isinstance(layer, LayerNorm):
            layer.weight = np.ones(layer.p)
            layer.bias = np.zeros(layer.p)
    return net


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("type")
    if kind == "linear":
        return Linear(spec["in"], spec["out"], use_bias=spec.get("bias", True))
    if kind == "conv2d":
        return Conv2d(spec["in"], spec["out"], spec["kernel"], spec.get("stride", 1), spec.get("padding", 0),
                      use_bias=spec.get("bias", True))
    if kind == "layernorm":
        return LayerNorm(spec["p"])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "meanpool":
        return MeanPool()
    raise ConfigurationError(f"unknown layer type {kind!r}")


def build_network(specs, mode: str = "full", seed: int = 0) -> Network:
    net = Network([layer_from_spec(s) for s in specs], mode=mode)
    return initialize(net, tn.SeededRng(seed, "init"))


@dataclass
class LayerRecord:
    """What forward kept for one layer. ``T``/``d`` describe the lowered input."""

    activation_cache: np.ndarray | None = None
    mask: np.ndarray | None = None
    norm_stats: tuple | None = None
    in_shape: tuple = ()
    out_shape: tuple = ()
    T: int = 0
    d: int = 0
    tokens: dict = field(default_factory=dict)

    def require_cache(self, index: int) -> np.ndarray:
        from .errors import PolicyError
        if self.activation_cache is None:
            raise PolicyError(f"layer {index}: weight gradient requested in activation-free mode")
        tn.check_tracked(self.activation_cache, f"layer {index} activation cache")
        return self.activation_cache

    def drop(self, key: str) -> None:
        tn.untrack(self.tokens.pop(key, None))


@dataclass
class ForwardTrace:
    output: np.ndarray
    records: list[LayerRecord]
    first_grad_layer: int | None
    output_token: object = None

    def release(self) -> None:
        tn.untrack(self.output_token)
        self.output_token = None
        for rec in self.records:
            for key in list(rec.tokens):
                rec.drop(key)


def _lead(x: np.ndarray) -> np.ndarray:
    """View rank-2 ``B x d`` input as ``B x 1 x d``."""
    return x[:, None, :] if x.ndim == 2 else x


def _layernorm_rows(x3: np.ndarray):
    mean = x3.mean(axis=-1, keepdims=True)
    centered = x3 - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    return mean, inv_std, centered * inv_std


def layernorm_forward(a: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != W.shape[0] or W.shape != b.shape:
        raise DimensionError(f"layernorm: input {a.shape} does not match parameters {W.shape}")
    _, _, xhat = _layernorm_rows(a)
    return xhat * W + b


def _check_input(i: int, layer: Layer, x: np.ndarray) -> None:
    name = type(layer).__name__
    if isinstance(layer, Linear):
        ok = x.ndim in (2, 3) and x.shape[-1] == layer.d
        want = f"(B, [T,] {layer.d})"
    elif isinstance(layer, Conv2d):
        ok = x.ndim == 4 and x.shape[1] == layer.c_in
        want = f"(B, {layer.c_in}, H, W)"
    elif isinstance(layer, LayerNorm):
        ok = x.ndim in (2, 3) and x.shape[-1] == layer.p
        want = f"(B, [T,] {layer.p})"
    elif isinstance(layer, MeanPool):
        ok, want = x.ndim == 3, "(B, T, p)"
    elif isinstance(layer, Flatten):
        ok, want = x.ndim >= 2, "(B, ...)"
    else:
        ok, want = True, ""
    if not ok:
        raise DimensionError(f"layer {i} ({name}): expected input {want}, got {tuple(x.shape)}")


def _first_grad_layer(net: Network) -> int | None:
    return min((i for i, l in enumerate(net.layers) if l.weight_trainable or l.bias_trainable), default=None)


def forward(net: Network, x: np.ndarray, grad: bool = True) -> ForwardTrace:
    """Run the network and keep exactly what backward needs.

    With ``grad=False`` nothing is cached (inference).
    """
    x = tn.as_tensor(x)
    first = _first_grad_layer(net) if grad else None
    records = []
    token = tn.track(x, "forward")
    for i, layer in enumerate(net.layers):
        _check_input(i, layer, x)
        rec = LayerRecord(in_shape=x.shape)
        need_input_grad = first is not None and i > first
        y = _layer_forward(layer, x, rec, need_input_grad, grad and layer.weight_trainable)
        rec.out_shape = y.shape
        records.append(rec)
        new_token = tn.track(y, "forward")
        tn.untrack(token)
        token = new_token
        x = y
    return ForwardTrace(output=x, records=records, first_grad_layer=first, output_token=token)


def inference(net: Network, x: np.ndarray) -> np.ndarray:
    trace = forward(net, x, grad=False)
    trace.release()
    return trace.output


def _layer_forward(layer: Layer, x, rec: LayerRecord, need_input_grad: bool, cache: bool) -> np.ndarray:
    if isinstance(layer, Linear):
        a3 = _lead(x)
        rec.T, rec.d = a3.shape[1], a3.shape[2]
        if cache:
            rec.activation_cache = a3
            rec.tokens["cache"] = tn.track(a3, "activation-cache")
        s3 = tn.matmul(a3, layer.weight)
        if layer.bias is not None:
            s3 = tn.add_bias(s3, layer.bias)
        return s3[:, 0, :] if x.ndim == 2 else s3
    if isinstance(layer, Conv2d):
        B, _, H, W = x.shape
        cols = tn.unfold2d(x, layer.kernel, layer.stride, layer.padding)
        oh, ow = tn.conv_output_size(H, W, layer.kernel, layer.stride, layer.padding)
        rec.T, rec.d = cols.shape[1], cols.shape[2]
        if cache:
            rec.activation_cache = cols
            rec.tokens["cache"] = tn.track(cols, "activation-cache")
        s3 = tn.matmul(cols, layer.weight)
        if layer.bias is not None:
            s3 = tn.add_bias(s3, layer.bias)
        return np.ascontiguousarray(s3.transpose(0, 2, 1)).reshape(B, layer.c_out, oh, ow)
    if isinstance(layer, LayerNorm):
        x3 = _lead(x)
        rec.T, rec.d = x3.shape[1], x3.shape[2]
        mean, inv_std, xhat = _layernorm_rows(x3)
        if cache:
            rec.activation_cache = xhat
            rec.tokens["cache"] = tn.track(xhat, "activation-cache")
        if need_input_grad:
            kept = None if cache else xhat
            rec.norm_stats = (mean, inv_std, kept)
            for j, arr in enumerate(rec.norm_stats):
                if arr is not None:
                    rec.tokens[f"stats{j}"] = tn.track(arr, "norm-stats")
        s3 = xhat * layer.weight + layer.bias
        return s3[:, 0, :] if x.ndim == 2 else s3
    if isinstance(layer, ReLU):
        if need_input_grad:
            rec.mask = x > 0
            rec.tokens["mask"] = tn.track(rec.mask, "nonlinearity-mask")
        return np.maximum(x, 0.0)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, MeanPool):
        return x.mean(axis=1)
    raise InternalError(f"no forward rule for {type(layer).__name__}")


@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray
    per_sample_loss: np.ndarray


def loss_softmax_ce(logits: np.ndarray, labels) -> LossResult:
    """Summed softmax cross-entropy; the gradient row of sample i is its own contribution."""
    if logits.ndim != 2:
        raise DimensionError(f"loss expects B x K logits, got {tuple(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise InputError(f"expected {B} labels, got shape {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(B)
    per_sample = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return LossResult(float(per_sample.sum()), dlogits, per_sample)


def count_params(net: Network) -> ParamCount:
    total = bias = 0
    for name, arr in net.parameters().items():
        total += arr.size
        if net.param_kind(name) == "bias":
            bias += arr.size
    if total == 0:
        warnings.warn("network has no parameters; reporting bias fraction 0", stacklevel=2)
        return ParamCount(0, 0, 0.0, empty=True)
    return ParamCount(total, bias, bias / total)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"DPBF"
VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in net.parameters().items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ParameterError("not a DPBF checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ParameterError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * count
    return out


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())
