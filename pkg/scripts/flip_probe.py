"""Compare x-flip TTA against y,z-only TTA on mirrored-pair phantoms."""

import argparse
import json
import logging
import tempfile

import torch

from abseg.experiments import flip_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", help="work directory (default: a temporary one)")
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--n-train", type=int, default=4)
    ap.add_argument("--n-test", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)
    out = args.out or tempfile.mkdtemp(prefix="flip_probe_")
    res = flip_probe(out, n_train=args.n_train, n_test=args.n_test, steps=args.steps, seed=args.seed)
    print(json.dumps({k: {"mean_dice": v["mean_dice"], "transforms": v["transforms"]} for k, v in res.items()},
                     indent=2))
    print(f"details in {out}/flip_probe.txt")


if __name__ == "__main__":
    main()
