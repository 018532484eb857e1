"""Command-line entry point: ``abseg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import RunConfig, load_run_config
from .network import plan_table, shape_plan
from .trainer import run_cross_validation
from .volume_io import DatasetManifest

log = logging.getLogger("abseg")

SUBCOMMANDS = ("synth", "preprocess", "train", "crossval", "predict", "ensemble", "pseudo-train", "evaluate",
               "plot", "shapes")


def _setup_logging(run_dir=None, verbose=False):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(fmt)
    root.addHandler(stream)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(Path(run_dir) / "run.log")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _workers():
    n = int(os.environ.get("ABSEG_NUM_WORKERS", "1"))
    if n < 1:
        raise ValueError("ABSEG_NUM_WORKERS must be >= 1")
    return n


def _run_config(args) -> RunConfig:
    overrides = {}
    task = getattr(args, "task", None)
    if task:
        overrides["task"] = task
    run = load_run_config(getattr(args, "config", None), **overrides)
    if getattr(args, "no_x_flip", False):
        axes = tuple(a for a in run.flip_axes if a != "x")
        run = RunConfig.from_dict({**run.to_dict(), "task": "custom", "flip_axes": list(axes)}).expand()
    if getattr(args, "overlap", None) is not None:
        run.inference.overlap = args.overlap
    if getattr(args, "gaussian_weighting", False):
        run.inference.weighting = "gaussian"
    if getattr(args, "steps", None) is not None:
        run.training.max_steps = args.steps
    return run


def _write_config(run, directory):
    run.save(Path(directory) / "config.expanded.json")


def build_parser():
    p = argparse.ArgumentParser(prog="abseg", description="Ensembled residual U-Net segmentation pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    s = sub.add_parser("synth", help="write synthetic phantom cases and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--n-test", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, nargs=3, default=(32, 32, 32))
    s.add_argument("--kind", choices=("default", "mirrored"), default="default")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--jitter", type=int, default=0)

    s = sub.add_parser("preprocess", help="clip, normalise and stack modalities")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--fold", type=int)
    s.add_argument("--resume")
    s.add_argument("--pseudo-manifest")
    s.add_argument("--steps", type=int, help="cap on optimisation steps")

    s = sub.add_parser("crossval", help="k-fold cross-validation")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--steps", type=int)

    s = sub.add_parser("predict", help="sliding-window + flip-TTA prediction with a model ensemble")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", action="append", required=True, help="checkpoint path (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=("task1", "task2", "custom"))
    s.add_argument("--no-x-flip", action="store_true")
    s.add_argument("--overlap", type=float)
    s.add_argument("--gaussian-weighting", action="store_true")
    s.add_argument("--split", choices=("train", "test"))

    s = sub.add_parser("ensemble", help="average probability maps of several predict runs")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("pseudo-train", help="pseudo-label the test split with an ensemble, then retrain")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", action="append", default=[])
    s.add_argument("--pseudo-manifest")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--task", choices=("task1", "task2", "custom"))
    s.add_argument("--no-x-flip", action="store_true")
    s.add_argument("--steps", type=int)

    s = sub.add_parser("evaluate", help="Dice / surface Dice report")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--tau", type=float, default=1.2)
    s.add_argument("--classes", type=int, nargs="+")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--method", default="model")
    s.add_argument("--out")

    s = sub.add_parser("plot", help="PNG slices with label contours")
    s.add_argument("--manifest", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--labels")
    s.add_argument("--modality", choices=("ct", "t1ce", "flair"), default="ct")
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--slices", type=int, nargs="+")
    s.add_argument("--out", required=True)

    s = sub.add_parser("shapes", help="print the network's stage shape table")
    s.add_argument("--config")
    s.add_argument("--input-shape", type=int, nargs=4, metavar=("C", "X", "Y", "Z"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(_workers())
    cmd = args.command
    out_dir = getattr(args, "run_dir", None) or getattr(args, "out", None)
    if cmd not in ("shapes",):
        _setup_logging(out_dir if cmd != "evaluate" else None, args.verbose)
    try:
        if cmd == "synth":
            pipeline.synth(args.out, args.n, args.seed, tuple(args.size), args.n_test, args.kind, args.noise,
                           args.jitter)
        elif cmd == "preprocess":
            run = _run_config(args)
            _write_config(run, args.out)
            pipeline.preprocess(DatasetManifest.load(args.manifest), run, args.out)
        elif cmd == "train":
            run = _run_config(args)
            _write_config(run, args.run_dir)
            pm = DatasetManifest.load(args.pseudo_manifest) if args.pseudo_manifest else None
            pipeline.train(run, DatasetManifest.load(args.manifest), args.run_dir, args.fold, args.resume, pm)
        elif cmd == "crossval":
            run = _run_config(args)
            _write_config(run, args.run_dir)
            res = run_cross_validation(run, DatasetManifest.load(args.manifest), args.k or run.folds, args.run_dir)
            print(res.table())
        elif cmd == "predict":
            run = _run_config(args)
            _write_config(run, args.out)
            pipeline.predict(run, DatasetManifest.load(args.manifest), args.models, args.out, args.split)
        elif cmd == "ensemble":
            pipeline.ensemble_dirs(args.inputs, args.out)
        elif cmd == "pseudo-train":
            run = _run_config(args)
            _write_config(run, args.run_dir)
            if not args.models and not args.pseudo_manifest:
                parser.error("pseudo-train needs --models or --pseudo-manifest")
            pm = DatasetManifest.load(args.pseudo_manifest) if args.pseudo_manifest else None
            pipeline.pseudo_train(run, DatasetManifest.load(args.manifest), args.models, args.run_dir, pm)
        elif cmd == "evaluate":
            report = pipeline.evaluate(args.pred_dir, args.gt_dir, args.tau, args.classes, args.out, args.method,
                                       args.num_classes)
            print(report.render())
        elif cmd == "plot":
            paths = pipeline.plot(DatasetManifest.load(args.manifest), args.case, args.out, args.labels,
                                  args.modality, args.axis, args.slices)
            for p in paths:
                print(p)
        elif cmd == "shapes":
            run = _run_config(args)
            shape = args.input_shape or (run.network.in_channels, *run.training.patch_size)
            print(plan_table(shape_plan(run.network, shape)))
    except SystemExit as exc:
        return int(exc.code or 2)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", cmd, exc)
        print(f"abseg {cmd}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
