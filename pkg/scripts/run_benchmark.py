"""Pooling methods on synthetic bursty data, swept over generator seeds.

    python3 scripts/run_benchmark.py --seeds 5 --out results/bench.csv
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from dgmp import bench
from dgmp.bench import BurstyGenConfig
from dgmp.pooling import PoolingConfig

METHODS = {
    "avg": PoolingConfig(method="avg"),
    "max": PoolingConfig(method="max"),
    "mixed(0.5)": PoolingConfig(method="mixed", mix_weight=0.5),
    "lse(10)": PoolingConfig(method="lse", lse_r=10.0),
    "gmp(1)": PoolingConfig(method="gmp", lam=1.0),
    "gmp(1e3)": PoolingConfig(method="gmp", lam=1e3),
    "gmp(1e5)": PoolingConfig(method="gmp", lam=1e5),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--burst-count", type=int, default=64)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    names = list(METHODS)
    table = np.zeros((args.seeds, len(names)))
    for seed in range(args.seeds):
        gen = BurstyGenConfig(burst_count=args.burst_count, seed=seed)
        rows = bench.run_benchmark(gen, list(METHODS.values()), names=names)
        table[seed] = [r.mAP for r in rows]

    print(f"{'method':<12}{'mean mAP':>10}{'min':>8}{'max':>8}  wins vs avg")
    for j, name in enumerate(names):
        wins = int(np.sum(table[:, j] > table[:, 0]))
        print(f"{name:<12}{table[:, j].mean():>10.4f}{table[:, j].min():>8.4f}{table[:, j].max():>8.4f}  {wins}/{args.seeds}")

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed"] + names)
            for seed, row in enumerate(table):
                w.writerow([seed] + [repr(float(v)) for v in row])
    return 0


if __name__ == "__main__":
    sys.exit(main())
