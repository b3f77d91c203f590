#!/usr/bin/env python3
"""Convergence comparison: two-stream vs single-stream on the standard scene.

Writes per-step loss curves for both runs and prints whether the two
branch losses of the two-stream run track each other.

Usage: python scripts/convergence_compare.py [--iters 2000] [--seed 0] [--out DIR]
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dgsplat.dataio import write_csv
from dgsplat.synth import generate, standard_scene
from dgsplat.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="convergence_out")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    frames, _ = generate(standard_scene())
    train_fs, _ = frames.split_holdout()

    two = train(train_fs, TrainConfig(iterations=args.iters, seed=args.seed))
    single = train(train_fs, TrainConfig(iterations=args.iters, seed=args.seed,
                                         encoder_enabled=False))

    rows = [[i, two.loss_history[i][0], two.loss_history[i][1],
             single.loss_history[i][0]] for i in range(args.iters)]
    write_csv(os.path.join(args.out, "curves.csv"),
              ["step", "two_stream_L_c", "two_stream_L_t", "baseline_L_c"], rows)

    tail = 50
    lc = np.mean([h[0] for h in two.loss_history[-tail:]])
    lt = np.mean([h[1] for h in two.loss_history[-tail:]])
    base = np.mean([h[0] for h in single.loss_history[-tail:]])
    print(f"final (tail-{tail} mean) losses:")
    print(f"  two-stream L_c {lc:.5f}   L_t {lt:.5f}   |L_c-L_t|/L_c {abs(lc-lt)/lc:.4f}")
    print(f"  baseline   L_c {base:.5f}")
    print(f"two-stream <= baseline: {lc <= base}")


if __name__ == "__main__":
    main()
