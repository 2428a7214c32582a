"""Accuracy of X full-tuning epochs followed by DP-BiTFiT, for several X.

    python3 scripts/two_phase_blobs.py --eps 8 --seeds 0 1 2
"""
import argparse
import math

import numpy as np

from dpbitfit.accountant import calibrate_sigma
from dpbitfit.nn import build_network
from dpbitfit.privacy import ClippingFn
from dpbitfit.train import Blobs, DPConfig, TrainConfig, make_task, train

MLP = [{"type": "linear", "in": 2, "out": 16}, {"type": "relu"}, {"type": "linear", "in": 16, "out": 2}]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", type=float, default=8.0)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--separation", type=float, default=4.0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--q", type=float, default=0.05)
    ap.add_argument("--X", nargs="+", type=int, default=[0, 1, 2, 5, 10])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    delta = 1 / (2 * args.n)
    sigma = calibrate_sigma(args.eps, delta, args.q, args.epochs * math.ceil(1 / args.q))
    print(f"sigma={sigma:.4f} for eps={args.eps} delta={delta:g}")
    print("X,mean_accuracy,min_accuracy,eps")
    for X in args.X:
        accs, eps = [], None
        for seed in args.seeds:
            data = make_task(Blobs(args.n, 2, 2, args.separation, seed))
            cfg = TrainConfig(mode="two_phase", X=X, epochs=args.epochs, q=args.q, optimizer="adam", lr=0.01,
                              privacy=DPConfig(sigma, ClippingFn("autos", 1.0), delta), seed=seed)
            res = train(build_network(MLP, seed=seed), data, cfg)
            accs.append(res.history[-1]["accuracy"])
            eps = res.privacy["eps"]
        print(f"{X},{np.mean(accs):.4f},{np.min(accs):.4f},{eps:.4f}")


if __name__ == "__main__":
    main()
