"""Overfit the tiny network on one phantom and print per-class Dice."""

import argparse
import json
import logging
import tempfile

import torch

from abseg.experiments import overfit_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", help="run directory (default: a temporary one)")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr0", type=float, default=0.1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)
    out = args.out or tempfile.mkdtemp(prefix="overfit_")
    res = overfit_smoke(out, steps=args.steps, size=args.size, seed=args.seed, lr0=args.lr0)
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
