#!/usr/bin/env python3
"""Granularity-count ablation: train and evaluate branch counts 1..G.

Each row trains a fresh model with dilations {1..G} under the same seed,
dataset, and step budget, then evaluates P@theta / mP on a held-out
synthetic set. Emits sweep.csv / sweep.json; the JSON carries full-scale
reference numbers for context (not asserted; desk-scale trends are noisy).
"""

import argparse
import sys

from mogref.cli import main as mogref_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--gmax", type=int, default=6)
    parser.add_argument("--scenes", type=int, default=16)
    parser.add_argument("--eval-scenes", type=int, default=16)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--out-dir", default="runs/sweep")
    args = parser.parse_args(argv)
    return mogref_main([
        "sweep",
        "--seed", str(args.seed),
        "--gmax", str(args.gmax),
        "--scenes", str(args.scenes),
        "--eval-scenes", str(args.eval_scenes),
        "--steps", str(args.steps),
        "--out-dir", args.out_dir,
    ])


if __name__ == "__main__":
    sys.exit(run())
