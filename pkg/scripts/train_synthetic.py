"""Train the linear embedding + GMP on the two-class synthetic task and
report loss, validation mAP and lambda per epoch.

    python3 scripts/train_synthetic.py --seeds 3 --lam 1 1000
"""

import argparse
import dataclasses
import sys

import numpy as np

from dgmp import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--lam", type=float, nargs="+", default=[1.0])
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    for lam in args.lam:
        for seed in range(args.seeds):
            gen, pool_cfg, cfg = bench.two_class_task(seed)
            pool_cfg = dataclasses.replace(pool_cfg, lam=lam)
            cfg = dataclasses.replace(cfg, epochs=args.epochs)
            data = bench.gen_bursty(gen)
            res = bench.train(bench.default_model(data, pool_cfg, cfg), data, cfg)
            print(f"# lambda0={lam:g} seed={seed} best_epoch={res.best_epoch}")
            for e in res.log:
                print(f"{e['epoch']:>4}  loss {e['loss']:.4f}  val mAP {e['val_mAP']:.4f}  lambda {e['lambda']:.4g}")
            losses = np.array([e["loss"] for e in res.log[1:]])
            if losses.size >= 10:
                print(f"# first-5 mean loss {losses[:5].mean():.4f}, last-5 {losses[-5:].mean():.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
