"""JSON run configuration for the ``train`` command.

A config looks like::

    {
      "task": {"kind": "blobs", "n": 2000, "dims": 2, "classes": 2, "separation": 4.0, "seed": 0},
      "network": [{"type": "linear", "in": 2, "out": 16}, {"type": "relu"},
                  {"type": "linear", "in": 16, "out": 2}],
      "mode": "bitfit",
      "privacy": {"eps": 8.0, "delta": 0.00025, "clipping": "autos", "R": 1.0},
      "optimizer": {"kind": "adam", "lr": 0.01},
      "epochs": 10, "q": 0.05, "seed": 0, "output_dir": "runs/blobs"
    }

``privacy`` may be omitted or null for a non-private run. Exactly one of
``eps`` and ``sigma`` must be given; ``eps`` is turned into a noise
multiplier by calibration. Every validation failure carries the JSON path
of the offending value.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .accountant import calibrate_sigma
from .errors import ConfigurationError, DPBFError
from .nn import Network, build_network, forward
from .privacy import CLIPPING_KINDS, STRATEGIES, ClippingFn
from .train import TRAIN_MODES, Blobs, DPConfig, Teacher, TrainConfig

OPTIMIZERS = ("sgd", "adam", "adamw")


class ConfigError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    task: object
    network_spec: list
    train: TrainConfig
    output_dir: str
    eps_target: float | None = None

    def build_network(self) -> Network:
        return build_network(self.network_spec, seed=self.train.seed)


def _get(doc: dict, key: str, path: str, kinds, required: bool = True, default=None):
    if key not in doc or doc[key] is None:
        if required:
            raise ConfigError(f"{path}/{key}", "missing required value")
        return default
    v = doc[key]
    if bool in kinds or not isinstance(v, bool):
        if isinstance(v, kinds):
            return v
    raise ConfigError(f"{path}/{key}", f"expected {'/'.join(k.__name__ for k in kinds)}, got {type(v).__name__}")


def _positive(v, path: str, strict: bool = True):
    if isinstance(v, float) and not math.isfinite(v):
        raise ConfigError(path, "must be finite")
    if v < 0 or (strict and v == 0):
        raise ConfigError(path, f"must be {'positive' if strict else 'non-negative'}, got {v}")
    return v


NUM = (int, float)


def _parse_task(doc, seed: int):
    if not isinstance(doc, dict):
        raise ConfigError("/task", "expected an object")
    kind = _get(doc, "kind", "/task", (str,))
    n = _positive(_get(doc, "n", "/task", (int,)), "/task/n")
    dims = _positive(_get(doc, "dims", "/task", (int,)), "/task/dims")
    task_seed = _get(doc, "seed", "/task", (int,), required=False, default=seed)
    if kind == "blobs":
        classes = _positive(_get(doc, "classes", "/task", (int,)), "/task/classes")
        if classes > dims:
            raise ConfigError("/task/classes", "blobs needs classes <= dims")
        if n < 2 * classes:
            raise ConfigError("/task/n", "blobs needs at least two points per class")
        sep = _positive(float(_get(doc, "separation", "/task", NUM)), "/task/separation", strict=False)
        return Blobs(n, dims, classes, sep, task_seed)
    if kind == "teacher":
        specs = _get(doc, "teacher_network", "/task", (list,))
        noise = _positive(float(_get(doc, "noise_std", "/task", NUM, required=False, default=0.0)),
                          "/task/noise_std", strict=False)
        teacher = _parse_network(specs, dims, "/task/teacher_network", task_seed)
        return Teacher(n, dims, teacher, noise, task_seed)
    raise ConfigError("/task/kind", f"unknown task kind {kind!r}")


def _parse_network(specs, dims: int, path: str, seed: int) -> Network:
    if not isinstance(specs, list) or not specs:
        raise ConfigError(path, "expected a non-empty list of layers")
    for i, s in enumerate(specs):
        if not isinstance(s, dict):
            raise ConfigError(f"{path}/{i}", "expected an object")
        for key in ("in", "out", "p", "kernel"):
            if key in s and isinstance(s[key], int) and s[key] < 1:
                raise ConfigError(f"{path}/{i}/{key}", f"must be positive, got {s[key]}")
    try:
        net = build_network(specs, seed=seed)
    except (KeyError, TypeError) as e:
        raise ConfigError(path, f"bad layer spec ({e})") from None
    except DPBFError as e:
        raise ConfigError(path, str(e)) from None
    try:
        out = forward(net, np.zeros((1, dims)), grad=False).output
    except DPBFError as e:
        raise ConfigError(path, str(e)) from None
    if out.ndim != 2:
        raise ConfigError(path, f"network must end in B x K logits, got rank {out.ndim}")
    net.n_outputs = out.shape[1]
    return net


def parse_config(doc: dict, seed_override: int | None = None, out_override: str | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    seed = _get(doc, "seed", "", (int,), required=False, default=0)
    if seed_override is not None:
        seed = seed_override
    if seed < 0:
        raise ConfigError("/seed", "seed must be non-negative")
    if "task" not in doc:
        raise ConfigError("/task", "missing required section")
    if "network" not in doc:
        raise ConfigError("/network", "missing required section")
    task = _parse_task(doc["task"], seed)
    net = _parse_network(doc["network"], task.dims, "/network", seed)
    if isinstance(task, Blobs) and net.n_outputs != task.classes:
        raise ConfigError("/network", f"network emits {net.n_outputs} logits for {task.classes} classes")

    mode = _get(doc, "mode", "", (str,), required=False, default="full")
    if mode not in TRAIN_MODES:
        raise ConfigError("/mode", f"unknown mode {mode!r}; expected one of {TRAIN_MODES}")
    epochs = _positive(_get(doc, "epochs", "", (int,)), "/epochs")
    q = float(_get(doc, "q", "", NUM))
    if not 0 < q <= 1:
        raise ConfigError("/q", f"must lie in (0, 1], got {q}")
    X = _get(doc, "X", "", (int,), required=mode == "two_phase", default=0)
    if mode == "two_phase" and not 0 <= X <= epochs:
        raise ConfigError("/X", f"must lie in [0, {epochs}]")

    opt = _get(doc, "optimizer", "", (dict,), required=False, default={"kind": "sgd", "lr": 0.01})
    kind = _get(opt, "kind", "/optimizer", (str,))
    if kind not in OPTIMIZERS:
        raise ConfigError("/optimizer/kind", f"unknown optimizer {kind!r}")
    lr = _positive(float(_get(opt, "lr", "/optimizer", NUM)), "/optimizer/lr")
    lr_bitfit = _get(opt, "lr_bitfit", "/optimizer", NUM, required=False)
    if lr_bitfit is not None:
        lr_bitfit = _positive(float(lr_bitfit), "/optimizer/lr_bitfit")
    wd = _positive(float(_get(opt, "weight_decay", "/optimizer", NUM, required=False, default=0.01)),
                   "/optimizer/weight_decay", strict=False)

    privacy, eps_target = None, None
    pdoc = doc.get("privacy")
    if pdoc is not None:
        if not isinstance(pdoc, dict):
            raise ConfigError("/privacy", "expected an object or null")
        has_eps = pdoc.get("eps") is not None
        has_sigma = pdoc.get("sigma") is not None
        if has_eps == has_sigma:
            raise ConfigError("/privacy", "give exactly one of eps and sigma")
        delta = float(_get(pdoc, "delta", "/privacy", NUM))
        if not 0 < delta < 1:
            raise ConfigError("/privacy/delta", f"must lie in (0, 1), got {delta}")
        clip_kind = _get(pdoc, "clipping", "/privacy", (str,), required=False, default="autos")
        if clip_kind not in CLIPPING_KINDS:
            raise ConfigError("/privacy/clipping", f"unknown clipping {clip_kind!r}")
        R = _positive(float(_get(pdoc, "R", "/privacy", NUM, required=False, default=1.0)), "/privacy/R")
        strategy = _get(pdoc, "strategy", "/privacy", (str,), required=False, default="ghost")
        if strategy not in STRATEGIES:
            raise ConfigError("/privacy/strategy", f"unknown strategy {strategy!r}")
        steps = epochs * math.ceil(1 / q - 1e-12)
        if has_eps:
            eps_target = _positive(float(pdoc["eps"]), "/privacy/eps")
            try:
                sigma = calibrate_sigma(eps_target, delta, q, steps)
            except DPBFError as e:
                raise ConfigError("/privacy/eps", str(e)) from None
        else:
            sigma = _positive(float(_get(pdoc, "sigma", "/privacy", NUM)), "/privacy/sigma", strict=False)
        if clip_kind == "noclip" and sigma > 0:
            raise ConfigError("/privacy/clipping", "noclip needs sigma = 0")
        privacy = DPConfig(sigma, ClippingFn(clip_kind, R), delta, strategy)

    out = out_override or _get(doc, "output_dir", "", (str,), required=False, default="runs/default")
    train = TrainConfig(mode=mode, epochs=epochs, q=q, privacy=privacy, optimizer=kind, lr=lr,
                        lr_bitfit=lr_bitfit, weight_decay=wd, seed=seed, X=X)
    return RunConfig(task, doc["network"], train, out, eps_target)


def load_config(path, seed_override=None, out_override=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError("", f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON: {e}") from None
    return parse_config(doc, seed_override, out_override)
