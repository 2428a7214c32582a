"""Optimizers, synthetic tasks and the (private) training loop.

An epoch is ``ceil(1/q)`` Poisson-sampled steps, so one epoch touches every
example once in expectation. Learning rates are for the summed loss. Bias-only
phases use ``lr_bitfit`` (ten times ``lr`` unless given).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import accountant
from . import tensor as tn
from .autograd import batch_grads
from .errors import ConfigurationError, DimensionError, InternalError, TrainingDiverged
from .nn import Network, checkpoint_bytes, inference, loss_softmax_ce
from .privacy import ClippingFn, PrivacySpec, STRATEGIES, dp_bitfit_step, dp_full_step, poisson_sample

TRAIN_MODES = ("full", "bitfit", "linear_probe", "two_phase")
METRICS_HEADER = ("epoch", "step", "loss", "accuracy", "eps_so_far", "grad_norm_median", "clip_fraction")


# -- optimizers ----------------------------------------------------------------

class Optimizer:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, net: Network, grads: dict[str, np.ndarray]) -> None:
        names = net.trainable_names()
        if list(grads) != names:
            raise InternalError(f"gradients for {list(grads)} but trainable parameters are {names}")
        params = net.parameters()
        for name in names:
            if grads[name].shape != params[name].shape:
                raise InternalError(f"{name}: gradient {grads[name].shape} vs parameter {params[name].shape}")
        self.t += 1
        for name in names:
            net.set_parameter(name, self._update(name, params[name], grads[name]))

    def drop(self, names) -> None:
        """Forget any per-parameter state for ``names``."""

    def _update(self, name, theta, g):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name, theta, g):
        return theta - self.lr * g


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def drop(self, names) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)

    def _direction(self, name, g):
        m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
        v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
        self.m[name], self.v[name] = m, v
        mhat = m / (1 - self.beta1**self.t)
        vhat = v / (1 - self.beta2**self.t)
        return mhat / (np.sqrt(vhat) + self.eps)

    def _update(self, name, theta, g):
        return theta - self.lr * self._direction(name, g)


class AdamW(Adam):
    def __init__(self, lr: float, weight_decay: float = 0.01, **kw):
        super().__init__(lr, weight_decay=weight_decay, **kw)

    def _update(self, name, theta, g):
        return theta - self.lr * (self._direction(name, g) + self.weight_decay * theta)


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.01) -> Optimizer:
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    if kind == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


# -- synthetic tasks -----------------------------------------------------------

@dataclass(frozen=True)
class Blobs:
    n: int
    dims: int
    classes: int
    separation: float
    seed: int = 0


@dataclass(frozen=True)
class Teacher:
    n: int
    dims: int
    teacher: Network
    noise_std: float = 0.0
    seed: int = 0


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def make_task(spec) -> Dataset:
    rng = tn.SeededRng(spec.seed, "task")
    if isinstance(spec, Blobs):
        if spec.classes > spec.dims:
            raise ConfigurationError("blobs needs classes <= dims (one axis per class centre)")
        if spec.n < 2 * spec.classes:
            raise ConfigurationError("blobs needs at least two points per class")
        labels = (np.arange(spec.n) % spec.classes)[rng.permutation(spec.n)]
        centres = spec.separation * np.eye(spec.dims)[labels]
        feats = centres + rng.standard_normal(spec.n * spec.dims).reshape(spec.n, spec.dims)
        return Dataset(feats, labels)
    if isinstance(spec, Teacher):
        feats = rng.standard_normal(spec.n * spec.dims).reshape(spec.n, spec.dims)
        logits = inference(spec.teacher, feats)
        if logits.ndim != 2:
            raise DimensionError("teacher network must produce B x K logits")
        logits = logits + tn.gaussian(logits.shape, spec.noise_std, rng)
        return Dataset(feats, np.argmax(logits, axis=1))
    raise ConfigurationError(f"unknown task spec {type(spec).__name__}")


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class DPConfig:
    sigma: float
    clipping: ClippingFn = ClippingFn()
    delta: float | None = None
    strategy: str = "ghost"
    nonprivate_ok: bool = False


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    epochs: int = 1
    q: float = 0.1
    privacy: DPConfig | None = None
    optimizer: str = "sgd"
    lr: float = 0.01
    lr_bitfit: float | None = None
    weight_decay: float = 0.01
    seed: int = 0
    X: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if not 0 < self.q <= 1:
            raise ConfigurationError(f"q must lie in (0, 1], got {self.q}")
        if self.mode == "two_phase" and not 0 <= self.X <= self.epochs:
            raise ConfigurationError(f"two-phase X={self.X} outside [0, {self.epochs}]")
        if self.privacy is not None and self.privacy.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.privacy.strategy!r}")

    @property
    def bitfit_lr(self) -> float:
        return 10 * self.lr if self.lr_bitfit is None else self.lr_bitfit

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(1 / self.q - 1e-12)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    checkpoint: bytes = b""
    privacy: dict = field(default_factory=dict)
    initial_accuracy: float = 0.0
    steps: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.history:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def evaluate(net: Network, data: Dataset) -> tuple[float, float]:
    """Mean per-sample loss and accuracy over the whole dataset."""
    logits = inference(net, data.features)
    res = loss_softmax_ce(logits, data.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return res.loss / len(data), acc


def _delta(config: TrainConfig, n: int) -> float:
    d = config.privacy.delta
    return 1.0 / (2 * n) if d is None else d


def privacy_report(config: TrainConfig, n: int, steps: int) -> dict:
    if config.privacy is None:
        return {"private": False, "eps": None, "delta": None, "sigma": None, "steps": steps, "alpha": None,
                "q": config.q}
    sigma = config.privacy.sigma
    delta = _delta(config, n)
    if sigma > 0:
        ed = accountant.epsilon(config.q, sigma, steps, delta)
        eps, alpha = ed.eps, ed.alpha
    else:
        eps, alpha = (0.0 if steps == 0 else math.inf), None
    return {"private": True, "eps": None if math.isinf(eps) else eps, "delta": delta, "sigma": sigma,
            "steps": steps, "alpha": alpha, "q": config.q}


def train(net: Network, data: Dataset, config: TrainConfig) -> TrainResult:
    """Run the configured schedule in place on ``net``."""
    n = len(data)
    if config.mode == "two_phase":
        net.set_mode("full" if config.X > 0 else "bitfit")
    else:
        net.set_mode(config.mode)
    sample_rng = tn.SeededRng(config.seed, "poisson")
    noise_rng = tn.SeededRng(config.seed, "noise")
    opt = make_optimizer(config.optimizer, config.lr, config.weight_decay)
    dp = config.privacy
    spec = None
    if dp is not None:
        spec = PrivacySpec(config.q, dp.sigma, dp.clipping, nonprivate_ok=dp.nonprivate_ok)
    result = TrainResult(initial_accuracy=evaluate(net, data)[1])
    step = 0
    for epoch in range(config.epochs):
        if config.mode == "two_phase" and epoch == config.X and config.X > 0:
            opt.drop(net.freeze_weights())
        bias_only = not any(layer.weight_trainable for layer in net.layers)
        opt.lr = config.bitfit_lr if bias_only else config.lr
        norms = []
        for _ in range(config.steps_per_epoch):
            idx = poisson_sample(n, config.q, sample_rng)
            xb, yb = data.features[idx], data.labels[idx]
            step += 1
            if spec is not None:
                res = (dp_bitfit_step(net, xb, yb, spec, noise_rng) if bias_only
                       else dp_full_step(net, xb, yb, spec, dp.strategy, noise_rng))
                grads, loss = res.grads, res.loss
                norms.append(res.norms)
            elif len(idx):
                grads, loss = batch_grads(net, xb, yb)
            else:
                params = net.parameters()
                grads, loss = {k: np.zeros_like(params[k]) for k in net.trainable_names()}, 0.0
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            opt.step(net, grads)
        loss, acc = evaluate(net, data)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        seen = np.concatenate(norms) if norms else np.zeros(0)
        report = privacy_report(config, n, step)
        result.history.append({
            "epoch": epoch + 1,
            "step": step,
            "loss": float(loss),
            "accuracy": acc,
            "eps_so_far": report["eps"],
            "grad_norm_median": float(np.median(seen)) if seen.size else None,
            "clip_fraction": float(np.mean(seen > dp.clipping.R)) if seen.size else None,
        })
    result.steps = step
    result.checkpoint = checkpoint_bytes(net)
    result.privacy = privacy_report(config, n, step)
    return result


def two_phase_train(net: Network, data: Dataset, config: TrainConfig) -> TrainResult:
    """``X`` epochs of full fine-tuning, then bias-only for the rest."""
    if config.mode != "two_phase":
        raise ConfigurationError("two_phase_train needs mode='two_phase'")
    return train(net, data, config)
