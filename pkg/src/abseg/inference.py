"""Sliding-window prediction, flip test-time augmentation, ensembling and pseudo labels."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import network
from .preprocess import AXIS_INDEX, axis_indices, load_image
from .volume_io import DatasetManifest, LabelMap, ManifestEntry, save_labelmap, save_volume

log = logging.getLogger(__name__)


@dataclass
class ProbabilityMap:
    probs: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ValueError(f"probability map must be (C, X, Y, Z), got {self.probs.shape}")

    @property
    def num_classes(self):
        return self.probs.shape[0]

    def check_simplex(self, tol=1e-5):
        if (self.probs < -tol).any():
            raise ValueError("negative probabilities")
        err = np.abs(self.probs.sum(axis=0) - 1).max()
        if err > tol:
            raise ValueError(f"channel sums deviate from 1 by {err:.3g}")


@dataclass
class TTAPlan:
    """Flip test-time augmentation restricted to ``allowed_axes``."""

    allowed_axes: tuple = ("x", "y", "z")

    def __post_init__(self):
        self.allowed_axes = tuple(sorted(set(self.allowed_axes), key=AXIS_INDEX.get))
        axis_indices(self.allowed_axes)

    @property
    def transforms(self):
        """Every subset of the allowed axes as spatial-axis index tuples; identity first."""
        idx = axis_indices(self.allowed_axes)
        return [c for r in range(len(idx) + 1) for c in itertools.combinations(idx, r)]

    def describe(self):
        return ["id" if not t else "".join("xyz"[a] for a in t) for t in self.transforms]


@dataclass
class InferenceConfig:
    overlap: float = 0.5
    weighting: str = "uniform"
    # None means the training patch size
    patch_size: Optional[tuple] = None

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.weighting not in ("uniform", "gaussian"):
            raise ValueError(f"weighting must be 'uniform' or 'gaussian', got {self.weighting!r}")
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)

    def patch(self, training_cfg=None):
        if self.patch_size is not None:
            return self.patch_size
        return tuple(training_cfg.patch_size)


# ---------------------------------------------------------------------------
# sliding window


def window_starts(extent, patch, overlap):
    """Evenly spaced window origins along one axis: first at 0, last flush with the end."""
    if patch <= 0:
        raise ValueError(f"degenerate patch size {patch}")
    if extent <= patch:
        return [0]
    target_step = patch * (1 - overlap)
    n = math.ceil((extent - patch) / target_step) + 1
    actual = (extent - patch) / (n - 1)
    return [int(round(actual * i)) for i in range(n)]


def gaussian_importance(patch, sigma_scale=1.0 / 8):
    grids = np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch], indexing="ij")
    g = np.ones(patch, dtype=np.float64)
    for axis_grid, p in zip(grids, patch):
        sigma = p * sigma_scale
        g *= np.exp(-0.5 * ((axis_grid - (p - 1) / 2) / sigma) ** 2)
    g /= g.max()
    g[g == 0] = g[g > 0].min()
    return g


def sliding_window(predict_fn, volume, patch, overlap=0.5, weighting="uniform"):
    """Tile ``volume`` (channels first) with overlapping windows and average the outputs.

    ``predict_fn`` maps a ``(channels, *patch)`` array to ``(C, *patch)``
    probabilities. Volumes smaller than the patch are edge-padded and the
    result cropped back.
    """
    volume = np.asarray(volume)
    patch = tuple(int(p) for p in patch)
    if any(p <= 0 for p in patch):
        raise ValueError(f"degenerate patch {patch}")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    spatial = volume.shape[1:]
    pads = [(max(0, p - e) // 2, max(0, p - e) - max(0, p - e) // 2) for e, p in zip(spatial, patch)]
    if any(a or b for a, b in pads):
        volume = np.pad(volume, [(0, 0)] + pads, mode="edge")
    padded = volume.shape[1:]
    starts = [window_starts(e, p, overlap) for e, p in zip(padded, patch)]
    weight = gaussian_importance(patch) if weighting == "gaussian" else np.ones(patch)

    acc = None
    norm = np.zeros(padded, dtype=np.float64)
    for origin in itertools.product(*starts):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        out = np.asarray(predict_fn(volume[(slice(None),) + sl]), dtype=np.float64)
        if acc is None:
            acc = np.zeros((out.shape[0],) + padded, dtype=np.float64)
        acc[(slice(None),) + sl] += out * weight
        norm[sl] += weight
    result = acc / norm
    crop = tuple(slice(a, a + e) for (a, _), e in zip(pads, spatial))
    return result[(slice(None),) + crop]


def count_windows(shape, patch, overlap):
    return int(np.prod([len(window_starts(e, p, overlap)) for e, p in zip(shape, patch)]))


# ---------------------------------------------------------------------------
# TTA, ensembling, labels


def _flip(a, axes, offset):
    return np.flip(a, axis=tuple(ax + offset for ax in axes)) if axes else a


def tta_predict(predict_fn, volume, plan: TTAPlan):
    """Average ``predict_fn`` over all flips in ``plan``, each mapped back to the input frame."""
    acc = None
    transforms = plan.transforms
    for axes in transforms:
        out = np.asarray(predict_fn(np.ascontiguousarray(_flip(volume, axes, 1))), dtype=np.float64)
        out = _flip(out, axes, 1)
        acc = out.copy() if acc is None else acc + out
    return acc / len(transforms)


def ensemble(preds):
    """Voxelwise arithmetic mean of probability maps."""
    preds = list(preds)
    if not preds:
        raise ValueError("ensemble needs at least one prediction")
    first = preds[0]
    for p in preds[1:]:
        if p.probs.shape != first.probs.shape:
            raise ValueError(f"shape mismatch: {p.probs.shape} vs {first.probs.shape}")
        if p.case_id != first.case_id:
            raise ValueError(f"case mismatch: {p.case_id!r} vs {first.case_id!r}")
    # extended-precision sum keeps the mean of identical maps bit-exact
    acc = np.zeros(first.probs.shape, dtype=np.longdouble)
    for p in preds:
        acc += p.probs
    mean = (acc / len(preds)).astype(np.float64)
    return ProbabilityMap(mean, first.spacing, first.case_id)


def argmax_labels(prob):
    """Voxelwise argmax; ties go to the lowest class index."""
    probs = prob.probs if isinstance(prob, ProbabilityMap) else np.asarray(prob)
    return LabelMap(np.argmax(probs, axis=0).astype(np.int16), probs.shape[0])


def model_predictor(model):
    """Wrap a network as ``patch -> full-resolution softmax probabilities``."""
    dtype = next(model.parameters()).dtype
    model.eval()

    def predict(patch):
        with torch.no_grad():
            x = torch.as_tensor(np.ascontiguousarray(patch), dtype=dtype)[None]
            logits = model(x)[0]
            return torch.softmax(logits, dim=1)[0].double().numpy()

    return predict


def predict_volume(models, image, plan: TTAPlan, patch, overlap=0.5, weighting="uniform", spacing=(1.0, 1.0, 1.0),
                   case_id=""):
    """Ensemble over models of flip-TTA over sliding-window predictions."""
    maps = []
    for model in models:
        fn = model_predictor(model)
        probs = tta_predict(lambda v: sliding_window(fn, v, patch, overlap, weighting), image, plan)
        maps.append(ProbabilityMap(probs, tuple(spacing), case_id))
    return ensemble(maps)


def load_models(paths, dtype=torch.float32):
    return [network.load_checkpoint(p).to_model(dtype) for p in paths]


# ---------------------------------------------------------------------------
# pseudo labels


def generate_pseudo_labels(checkpoints, unlabeled: DatasetManifest, plan: TTAPlan, patch, overlap, out_dir,
                           weighting="uniform", preprocess_cfg=None) -> DatasetManifest:
    """Label unlabelled cases with the ensemble's hard prediction.

    Writes one label map and one provenance sidecar per case plus a manifest
    whose entries point at the pseudo labels.
    """
    if not checkpoints:
        raise ValueError("need at least one model")
    from .preprocess import PreprocessConfig

    preprocess_cfg = preprocess_cfg or PreprocessConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = load_models(checkpoints)
    entries = []
    for entry in unlabeled.entries:
        image, spacing = load_image(unlabeled, entry, preprocess_cfg)
        prob = predict_volume(models, image, plan, patch, overlap, weighting, spacing, entry.case_id)
        labels = argmax_labels(prob)
        label_path = out_dir / f"{entry.case_id}_pseudo.json"
        save_labelmap(labels, label_path, spacing)
        provenance = {
            "case_id": entry.case_id,
            "models": [str(Path(c)) for c in checkpoints],
            "flip_axes": list(plan.allowed_axes),
            "transforms": plan.describe(),
            "patch_size": list(patch),
            "overlap": overlap,
            "weighting": weighting,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        (out_dir / f"{entry.case_id}_pseudo.provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")
        new = ManifestEntry(**{**entry.__dict__})
        for attr in ("ct", "t1ce", "flair", "image"):
            rel = getattr(entry, attr)
            if rel is not None:
                setattr(new, attr, str(unlabeled.resolve(rel).resolve()))
        new.label = label_path.name
        new.split = "train"
        entries.append(new)
        log.info("pseudo-labelled %s with %d model(s), %d TTA transforms", entry.case_id, len(models),
                 len(plan.transforms))
    manifest = DatasetManifest(entries, unlabeled.num_classes, list(unlabeled.class_names), unlabeled.spacing, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def save_probability_map(prob: ProbabilityMap, path):
    save_volume(prob.probs.astype(np.float32), path, prob.spacing)
