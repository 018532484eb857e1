"""File-to-file pipeline stages behind the command line.

Every stage reads its inputs from disk and writes its outputs to disk, so
stages compose through files only.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import inference, metrics, synthdata, trainer
from .config import RunConfig
from .plotting import plot_overlay
from .preprocess import load_image, load_training_case, preprocess_volume
from .volume_io import (
    DatasetManifest,
    ManifestEntry,
    load_case,
    load_labelmap,
    load_volume,
    make_folds,
    save_labelmap,
    save_volume,
)

log = logging.getLogger(__name__)

LABELS_DIR = "labels"
PROBS_DIR = "probs"


def synth(out_dir, n_cases=4, seed=0, size=(32, 32, 32), n_test=0, kind="default", noise_sigma=0.05, jitter=0):
    if kind == "default":
        spec = synthdata.PhantomSpec(size=size, num_classes=5, noise_sigma=noise_sigma, jitter=jitter)
        names = ["background", "sphere", "box", "pair_left", "pair_right"]
    elif kind == "mirrored":
        spec = synthdata.PhantomSpec(size=size, num_classes=3, noise_sigma=noise_sigma, jitter=jitter,
                                     shapes=synthdata.mirrored_pair_shapes(size))
        names = ["background", "pair_left", "pair_right"]
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    manifest = synthdata.make_dataset(n_cases, spec, seed, out_dir, n_test=n_test, class_names=names)
    log.info("wrote %d train + %d test phantoms to %s", n_cases, n_test, out_dir)
    return manifest


def preprocess(manifest: DatasetManifest, run: RunConfig, out_dir):
    """Store the stacked, normalised network input of every case."""
    out_dir = Path(out_dir)
    entries = []
    for e in manifest.entries:
        volume = load_case(manifest, e)
        image = preprocess_volume(volume, *run.preprocess.ct_clip)
        path = out_dir / f"{e.case_id}_image.json"
        save_volume(image, path, volume.spacing)
        new = ManifestEntry(**{**e.__dict__})
        for attr in ("ct", "t1ce", "flair", "label"):
            rel = getattr(e, attr)
            if rel is not None:
                setattr(new, attr, str(manifest.resolve(rel).resolve()))
        new.image = path.name
        entries.append(new)
    out = DatasetManifest(entries, manifest.num_classes, list(manifest.class_names), manifest.spacing, out_dir)
    out.save(out_dir / "manifest.json")
    return out


def load_cases(manifest, ids, run):
    return [load_training_case(manifest, manifest.get(c), run.preprocess)[:2] for c in ids]


def train(run: RunConfig, manifest: DatasetManifest, run_dir, fold=None, resume=None, pseudo_manifest=None):
    """Train on all labelled cases, or on the folds other than ``fold``."""
    if fold is not None:
        folds = make_folds(manifest, run.folds, run.training.seed)
        ids = folds.train_ids(fold)
    else:
        ids = manifest.train_ids()
    cases = load_cases(manifest, ids, run)
    pseudo_cases = None
    cfg = run.training
    if pseudo_manifest is not None:
        pseudo_cases = [load_training_case(pseudo_manifest, e, run.preprocess)[:2] for e in pseudo_manifest.entries]
        if not cfg.pseudo_enabled:
            cfg = dataclasses.replace(cfg, pseudo_enabled=True)
    log.info("training on %d cases%s", len(cases), f" + {len(pseudo_cases)} pseudo-labelled" if pseudo_cases else "")
    return trainer.train(run.network, cfg, run.loss, cases, run_dir, pseudo_cases=pseudo_cases,
                         policy=run.augmentation, resume=resume)


def predict(run: RunConfig, manifest: DatasetManifest, model_paths, out_dir, split=None):
    """Ensemble + flip-TTA + sliding-window prediction; writes label maps and probability maps."""
    out_dir = Path(out_dir)
    plan = inference.TTAPlan(run.flip_axes)
    log.info("TTA transforms: %d (%s)", len(plan.transforms), ", ".join(plan.describe()))
    log.info("ensembling %d model(s)", len(model_paths))
    models = inference.load_models(model_paths)
    patch = run.inference.patch(run.training)
    written = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        image, spacing = load_image(manifest, e, run.preprocess)
        prob = inference.predict_volume(models, image, plan, patch, run.inference.overlap, run.inference.weighting,
                                        spacing, e.case_id)
        inference.save_probability_map(prob, out_dir / PROBS_DIR / f"{e.case_id}.json")
        save_labelmap(inference.argmax_labels(prob), out_dir / LABELS_DIR / f"{e.case_id}.json", spacing)
        written.append(e.case_id)
        log.info("predicted %s", e.case_id)
    (out_dir / "predict.json").write_text(json.dumps(
        {"models": [str(p) for p in model_paths], "transforms": plan.describe(), "cases": written}, indent=2) + "\n")
    return written


def ensemble_dirs(input_dirs, out_dir):
    """Average probability maps written by several ``predict`` runs."""
    out_dir = Path(out_dir)
    dirs = [Path(d) / PROBS_DIR for d in input_dirs]
    ids = sorted(p.name[: -len(".json")] for p in dirs[0].glob("*.json"))
    for case_id in ids:
        maps = []
        for d in dirs:
            probs, spacing = load_volume(d / f"{case_id}.json")
            maps.append(inference.ProbabilityMap(probs.astype(np.float64), spacing, case_id))
        prob = inference.ensemble(maps)
        inference.save_probability_map(prob, out_dir / PROBS_DIR / f"{case_id}.json")
        save_labelmap(inference.argmax_labels(prob), out_dir / LABELS_DIR / f"{case_id}.json", prob.spacing)
    return ids


def pseudo_train(run: RunConfig, manifest: DatasetManifest, model_paths, run_dir, pseudo_manifest=None):
    """Label the test split with the model ensemble, then train on labelled + pseudo-labelled data."""
    run_dir = Path(run_dir)
    if pseudo_manifest is None:
        unlabeled = manifest.subset(split="test")
        if not unlabeled.entries:
            raise ValueError("manifest has no test cases to pseudo-label")
        pseudo_manifest = inference.generate_pseudo_labels(
            model_paths, unlabeled, inference.TTAPlan(run.flip_axes), run.inference.patch(run.training),
            run.inference.overlap, run_dir / "pseudo", run.inference.weighting, run.preprocess,
        )
    return train(run, manifest.subset(split="train"), run_dir, pseudo_manifest=pseudo_manifest)


def _label_files(directory):
    directory = Path(directory)
    if (directory / LABELS_DIR).is_dir():
        directory = directory / LABELS_DIR
    found = {}
    for p in sorted(directory.glob("*.json")):
        found[p.name[: -len(".json")]] = p
    for p in sorted(directory.glob("*.nii*")):
        found[p.name.split(".nii")[0]] = p
    return found


def _gt_files(gt_dir):
    gt_dir = Path(gt_dir)
    manifest_path = gt_dir / "manifest.json"
    if manifest_path.exists():
        m = DatasetManifest.load(manifest_path)
        files = {e.case_id: m.resolve(e.label) for e in m.entries if e.label is not None}
        if (gt_dir / "gt").is_dir():
            files.update(_label_files(gt_dir / "gt"))
        return files, m.num_classes, m.class_names
    return _label_files(gt_dir), None, None


def evaluate(pred_dir, gt_dir, tau=1.2, classes=None, out=None, method="model", num_classes=None,
             empty_score=1.0):
    preds = _label_files(pred_dir)
    gts, n_cls, names = _gt_files(gt_dir)
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise KeyError(f"no ground truth for predicted cases {missing}")
    n_cls = num_classes or n_cls
    if n_cls is None:
        raise ValueError("number of classes unknown; pass num_classes or use a dataset dir with a manifest")
    pred_maps, gt_maps = {}, {}
    for cid, path in preds.items():
        p, _ = load_labelmap(path, n_cls)
        g, spacing = load_labelmap(gts[cid], n_cls)
        pred_maps[cid] = (p.labels, spacing)
        gt_maps[cid] = (g.labels, spacing)
    classes = list(classes) if classes else list(range(1, n_cls))
    report = metrics.evaluate_cases(pred_maps, gt_maps, classes, tau, names, method, empty_score)
    if out is None:
        base = Path(pred_dir)
        out = base / "report" if (base / LABELS_DIR).is_dir() else base.parent / "report"
    report.save(Path(out))
    return report


def plot(manifest: DatasetManifest, case_id, out_dir, labels_path=None, modality="ct", axis="z", slices=None):
    entry = manifest.get(case_id)
    volume = load_case(manifest, entry)
    grid = getattr(volume, modality)
    if labels_path is not None:
        labels, _ = load_volume(labels_path)
    elif entry.label is not None:
        labels, _ = load_volume(manifest.resolve(entry.label))
    else:
        labels = None
    return plot_overlay(grid, labels, out_dir, axis, slices, prefix=f"{case_id}_{modality}")
