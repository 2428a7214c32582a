"""Step time and memory of each method as the sequence length grows.

    python3 scripts/scaling_vs_T.py --T 64 128 256 512 1024 --out results/scaling.csv
"""
import argparse
from pathlib import Path

from dpbitfit.bench import BENCH_METHODS, bench_scaling, rows_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", nargs="+", default=list(BENCH_METHODS))
    ap.add_argument("--T", nargs="+", type=int, default=[64, 128, 256, 512, 1024])
    ap.add_argument("--B", type=int, default=32)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--p", type=int, default=64)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    rows = bench_scaling(args.methods, args.T, args.B, args.d, args.p, reps=args.reps)
    text = rows_to_csv(rows)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print(text, end="")
    # per-method growth of the DP-specific time from the shortest to the longest T
    by = {(r.method, r.T): r for r in rows}
    lo, hi = min(args.T), max(args.T)
    for m in args.methods:
        a, b = by[(m, lo)], by[(m, hi)]
        if a.dp_overhead_seconds > 0:
            print(f"# {m}: dp overhead x{b.dp_overhead_seconds / a.dp_overhead_seconds:.2f}, "
                  f"cache {a.activation_cache_bytes} -> {b.activation_cache_bytes} bytes")


if __name__ == "__main__":
    main()
