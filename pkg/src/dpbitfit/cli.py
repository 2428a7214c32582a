"""``dpbf`` command line.

Exit codes: 0 success, 2 invalid configuration or parameters, 3 numeric
divergence during training.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import os
import sys
from pathlib import Path

from . import accountant, analysis, bench
from .config import load_config
from .errors import ConfigurationError, DPBFError, TrainingDiverged
from .nn import Linear, Network, count_params, save_checkpoint
from .train import make_task, train

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _csv_list(kind):
    def parse(s):
        try:
            return [kind(v) for v in s.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {s!r}") from None
    return parse


def _emit(text: str, out: str | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / name).write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _eps_dict(q, sigma, steps, delta):
    ed = accountant.epsilon(q, sigma, steps, delta)
    eps = None if math.isinf(ed.eps) else ed.eps
    return {"eps": eps, "alpha": ed.alpha, "sigma": sigma, "steps": steps, "q": q, "delta": delta}


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigurationError("train needs --config")
    rc = load_config(args.config, args.seed, args.out)
    data = make_task(rc.task)
    net = rc.build_network()
    result = train(net, data, rc.train)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    save_checkpoint(net, out / "checkpoint.dpbf")
    report = dict(result.privacy, eps_target=rc.eps_target, final_accuracy=result.history[-1]["accuracy"],
                  initial_accuracy=result.initial_accuracy)
    (out / "privacy.json").write_text(_json(report), encoding="utf-8")
    print(_json(report), end="")
    return 0


def cmd_bench_scaling(args) -> int:
    rows = bench.bench_scaling(args.methods, args.T, args.B, args.d, args.p, args.reps, args.warmup,
                               seed=args.seed or 0)
    _emit(bench.rows_to_csv(rows), args.out, "bench_scaling.csv")
    return 0


def cmd_bench_models(args) -> int:
    rows = bench.bench_models(args.methods, args.widths, args.budget, T=args.T, d_in=args.d_in,
                              classes=args.classes, reps=args.reps, warmup=args.warmup, seed=args.seed or 0)
    _emit(bench.rows_to_csv(rows), args.out, "bench_models.csv")
    return 0


def cmd_account(args) -> int:
    _emit(_json(_eps_dict(args.q, args.sigma, args.steps, args.delta)), args.out, "account.json")
    return 0


def cmd_calibrate(args) -> int:
    sigma = accountant.calibrate_sigma(args.eps, args.delta, args.q, args.steps)
    _emit(_json(_eps_dict(args.q, sigma, args.steps, args.delta)), args.out, "calibrate.json")
    return 0


def _network_dims(args):
    if args.config:
        rc = load_config(args.config, args.seed)
        net = rc.build_network()
        return analysis.dims_from_network(net, args.B, (rc.task.dims,), args.r)
    missing = [k for k in ("T", "p", "d") if getattr(args, k) is None]
    if missing:
        raise ConfigurationError(f"complexity needs --config or all of --T --p --d (missing {missing})")
    return [(0, analysis.LayerDims(args.B, args.T, args.p, args.d, args.r))]


def cmd_complexity(args) -> int:
    import io
    rows = analysis.complexity_rows(_network_dims(args), args.methods or analysis.METHODS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(analysis.COMPLEXITY_HEADER)
    w.writerows(rows)
    _emit(buf.getvalue(), args.out, "complexity.csv")
    return 0


def cmd_param_report(args) -> int:
    if args.config:
        net = load_config(args.config, args.seed).build_network()
    elif args.linear:
        d, p = args.linear
        net = Network([Linear(d, p)])
    else:
        raise ConfigurationError("param-report needs --config or --linear D P")
    pc = count_params(net)
    _emit(_json({"total": pc.total, "bias": pc.bias, "fraction": pc.fraction}), args.out, "param_report.json")
    return 0


def _common_flags(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=default, help="overrides the config seed")
    common.add_argument("--out", default=default, help="output directory (stdout when omitted, except train)")
    common.add_argument("--threads", type=int, default=default, help="BLAS threads (env DPBF_THREADS)")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpbf", description="Differentially private bias-term fine-tuning toolkit",
                                parents=[_common_flags(None)])
    # suppressed defaults so a flag given before the subcommand is not reset after it
    common = _common_flags(argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train from a JSON config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("bench-scaling", parents=[common], help="step time and memory versus T")
    s.add_argument("--methods", type=_csv_list(str), default=list(bench.BENCH_METHODS))
    s.add_argument("--T", type=_csv_list(int), default=[128, 1024])
    s.add_argument("--B", type=int, default=32)
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--p", type=int, default=64)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--warmup", type=int, default=2)
    s.set_defaults(fn=cmd_bench_scaling)

    s = sub.add_parser("bench-models", parents=[common], help="max batch under a memory budget")
    s.add_argument("--methods", type=_csv_list(str), default=list(bench.BENCH_METHODS))
    s.add_argument("--widths", type=_csv_list(int), default=[16, 64])
    s.add_argument("--budget", type=int, required=True, help="ledger budget in bytes")
    s.add_argument("--T", type=int, default=8)
    s.add_argument("--d-in", dest="d_in", type=int, default=16)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--warmup", type=int, default=2)
    s.set_defaults(fn=cmd_bench_models)

    s = sub.add_parser("account", parents=[common], help="epsilon for (q, sigma, steps, delta)")
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.set_defaults(fn=cmd_account)

    s = sub.add_parser("calibrate", parents=[common], help="sigma reaching a target epsilon")
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("complexity", parents=[common], help="analytic cost table as CSV")
    s.add_argument("--B", type=int, default=1)
    s.add_argument("--T", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--r", type=int)
    s.add_argument("--methods", type=_csv_list(str))
    s.set_defaults(fn=cmd_complexity)

    s = sub.add_parser("param-report", parents=[common], help="total / bias parameter counts")
    s.add_argument("--linear", type=int, nargs=2, metavar=("D", "P"))
    s.set_defaults(fn=cmd_param_report)
    return p


def _thread_limit(threads):
    if threads is None:
        env = os.environ.get("DPBF_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise ConfigurationError("--threads must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.fn(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DPBFError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
