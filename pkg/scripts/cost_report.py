"""Analytic time/space costs per layer and the whole-network ratios.

    python3 scripts/cost_report.py --B 16 --T 512 --width 512
"""
import argparse

from dpbitfit.analysis import COMPLEXITY_HEADER, METHODS, complexity_rows, dims_from_network, network_ratio, param_report
from dpbitfit.bench import mlp_network


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--B", type=int, default=16)
    ap.add_argument("--T", type=int, default=512)
    ap.add_argument("--d-in", type=int, default=512)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--classes", type=int, default=10)
    args = ap.parse_args()
    net = mlp_network(args.d_in, args.width, args.classes)
    dims = dims_from_network(net, args.B, (args.T, args.d_in))
    methods = [m for m in METHODS if m not in ("lora", "adapter")]
    print(",".join(COMPLEXITY_HEADER))
    for row in complexity_rows(dims, methods):
        print(",".join(str(v) for v in row))
    report = param_report(net)
    print(f"# trainable bias fraction {report['fraction']:.5f}")
    for m in methods:
        print(f"# time {m} / dp_bias = {network_ratio([d for _, d in dims], m, 'dp_bias'):.3f}")


if __name__ == "__main__":
    main()
