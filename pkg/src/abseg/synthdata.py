"""Deterministic multi-modal phantoms with exact label maps.

A phantom is a stack of simple solids drawn in order (later shapes overwrite
earlier ones). ``mirrored_spheres`` draws a left/right pair symmetric about
the x mid-plane with two distinct class ids, mimicking paired organs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import DatasetManifest, LabelMap, ManifestEntry, MultiModalVolume, save_case, save_labelmap


@dataclass
class PhantomSpec:
    size: tuple = (64, 64, 64)
    num_classes: int = 5
    seed: int = 0
    # each shape: {"kind": "sphere", "class_id", "center", "radius"}
    #             {"kind": "box", "class_id", "center", "half_size"}
    #             {"kind": "mirrored_spheres", "class_id", "class_id_right", "center", "radius"}
    # centres are voxel coordinates; mirrored pairs take the left member's centre
    shapes: list = field(default_factory=list)
    noise_sigma: float = 0.05
    spacing: tuple = (1.2, 1.2, 1.2)
    # random integer shift (voxels) applied per case by make_dataset
    jitter: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not self.shapes:
            self.shapes = default_shapes(self.size)
        self.validate()

    def class_ids(self):
        ids = []
        for s in self.shapes:
            ids.append(s["class_id"])
            if s["kind"] == "mirrored_spheres":
                ids.append(s["class_id_right"])
        return ids

    def validate(self):
        ids = self.class_ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"class ids must be distinct, got {ids}")
        if any(not 0 < c < self.num_classes for c in ids):
            raise ValueError(f"class ids must lie in [1, {self.num_classes - 1}], got {ids}")
        for s in self.shapes:
            c = np.asarray(s["center"], dtype=float)
            ext = float(s["radius"]) if "radius" in s else np.asarray(s["half_size"], dtype=float)
            if np.any(c - ext < -0.5) or np.any(c + ext > np.asarray(self.size) - 0.5):
                raise ValueError(f"shape {s} does not fit inside grid {self.size}")

    def to_dict(self):
        return {
            "size": list(self.size),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "shapes": self.shapes,
            "noise_sigma": self.noise_sigma,
            "spacing": list(self.spacing),
            "jitter": self.jitter,
        }


def default_shapes(size):
    """Sphere (1), box (2) and a mirrored sphere pair (3 left, 4 right), scaled to ``size``."""
    x, y, z = size
    r = min(size) / 8
    return [
        {"kind": "sphere", "class_id": 1, "center": [(x - 1) / 2, 0.3 * (y - 1), (z - 1) / 2], "radius": r},
        {"kind": "box", "class_id": 2, "center": [(x - 1) / 2, 0.72 * (y - 1), (z - 1) / 2],
         "half_size": [min(size) / 10, min(size) / 12, min(size) / 8]},
        {"kind": "mirrored_spheres", "class_id": 3, "class_id_right": 4,
         "center": [0.22 * (x - 1), 0.5 * (y - 1), (z - 1) / 2], "radius": 0.8 * r},
    ]


def mirrored_pair_shapes(size, radius_frac=0.14, center_frac=(0.25, 0.5, 0.5)):
    x, y, z = size
    return [
        {"kind": "mirrored_spheres", "class_id": 1, "class_id_right": 2,
         "center": [center_frac[0] * (x - 1), center_frac[1] * (y - 1), center_frac[2] * (z - 1)],
         "radius": radius_frac * min(size)},
    ]


def _coords(size):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in size], indexing="ij")


def _shape_masks(shape, size, coords):
    if shape["kind"] == "sphere":
        c, r = shape["center"], float(shape["radius"])
        d2 = sum((g - ci) ** 2 for g, ci in zip(coords, c))
        return [(shape["class_id"], d2 <= r * r)]
    if shape["kind"] == "box":
        c, h = shape["center"], shape["half_size"]
        m = np.ones(size, dtype=bool)
        for g, ci, hi in zip(coords, c, h):
            m &= np.abs(g - ci) <= hi
        return [(shape["class_id"], m)]
    if shape["kind"] == "mirrored_spheres":
        c, r = list(shape["center"]), float(shape["radius"])
        right = [size[0] - 1 - c[0], c[1], c[2]]
        out = []
        for cid, cc in ((shape["class_id"], c), (shape["class_id_right"], right)):
            d2 = sum((g - ci) ** 2 for g, ci in zip(coords, cc))
            out.append((cid, d2 <= r * r))
        return out
    raise ValueError(f"unknown shape kind {shape['kind']!r}")


def _class_levels(num_classes):
    # distinct contrast per class; the two members of a mirrored pair share a level
    return {c: 0.25 + 0.75 * c / max(1, num_classes - 1) for c in range(num_classes)}


def make_phantom(spec: PhantomSpec, return_provenance=False):
    """Render ``spec`` into (MultiModalVolume, LabelMap).

    Contrast rules: CT is a per-structure constant, T1ce the inverted
    contrast, FLAIR the CT contrast with bright structure rims. Each modality
    gets independent Gaussian noise.
    """
    size = spec.size
    coords = _coords(size)
    labels = np.zeros(size, dtype=np.int16)
    level = np.zeros(size, dtype=np.float64)
    levels = _class_levels(spec.num_classes)
    overwritten = []
    for i, shape in enumerate(spec.shapes):
        for j, (cid, mask) in enumerate(_shape_masks(shape, size, coords)):
            clash = mask & (labels > 0)
            if clash.any():
                overwritten.append({"shape": i, "member": j, "class_id": cid, "voxels": int(clash.sum()),
                                    "over": sorted(int(v) for v in np.unique(labels[clash]))})
            labels[mask] = cid
            # mirrored members share one intensity so only position tells them apart
            lvl_id = shape["class_id"]
            level[mask] = levels[lvl_id]

    fg = labels > 0
    rim = fg & ~ndimage.binary_erosion(fg, iterations=1, border_value=0)
    # edges between touching structures also count as rim
    for c in np.unique(labels[fg]):
        m = labels == c
        rim |= m & ~ndimage.binary_erosion(m, iterations=1, border_value=0)

    rng = np.random.default_rng(spec.seed)

    def noise():
        return rng.normal(0.0, spec.noise_sigma, size) if spec.noise_sigma > 0 else 0.0

    ct = 100.0 * level + 100.0 * noise()
    t1 = (1.0 - level) + noise()
    flair = 0.5 * level + 0.5 * rim + noise()
    volume = MultiModalVolume(
        ct.astype(np.float32), t1.astype(np.float32), flair.astype(np.float32), spec.spacing,
        case_id=f"phantom_{spec.seed}",
    )
    lm = LabelMap(labels, spec.num_classes)
    if return_provenance:
        return volume, lm, {"spec": spec.to_dict(), "overwritten": overwritten}
    return volume, lm


def _jittered(spec: PhantomSpec, rng):
    if not spec.jitter:
        return spec
    shapes = []
    for s in spec.shapes:
        s = json.loads(json.dumps(s))
        shift = rng.integers(-spec.jitter, spec.jitter + 1, size=3).astype(float)
        # a mirrored pair stays symmetric: the right member is always derived from the left
        new_c = np.asarray(s["center"]) + shift
        ext = float(s["radius"]) if "radius" in s else np.asarray(s["half_size"], dtype=float)
        lo = ext - 0.5
        hi = np.asarray(spec.size) - 0.5 - ext
        s["center"] = np.clip(new_c, lo, hi).tolist()
        shapes.append(s)
    return PhantomSpec(spec.size, spec.num_classes, spec.seed, shapes, spec.noise_sigma, spec.spacing, 0)


def make_dataset(n_cases, template: PhantomSpec, seed, out_dir, n_test=0, class_names=None) -> DatasetManifest:
    """Write ``n_cases`` labelled phantoms (+ ``n_test`` unlabelled ones) in raw+JSON format.

    Test-case ground truth goes to ``gt/`` outside the manifest so it can be
    scored later without being visible to training.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    provenance = {}
    for i in range(n_cases + n_test):
        case_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        rng = np.random.default_rng([seed, i, 1])
        base = PhantomSpec(template.size, template.num_classes, case_seed, template.shapes, template.noise_sigma,
                           template.spacing, template.jitter)
        spec = _jittered(base, rng)
        volume, labels, prov = make_phantom(spec, return_provenance=True)
        split = "train" if i < n_cases else "test"
        case_id = f"case_{i:03d}" if split == "train" else f"test_{i - n_cases:03d}"
        volume.case_id = case_id
        paths = save_case(volume, out_dir)
        rel = {k: p.name for k, p in paths.items()}
        if split == "train":
            save_labelmap(labels, out_dir / f"{case_id}_label.json", spec.spacing)
            entries.append(ManifestEntry(case_id, label=f"{case_id}_label.json", split="train", **rel))
        else:
            save_labelmap(labels, out_dir / "gt" / f"{case_id}.json", spec.spacing)
            entries.append(ManifestEntry(case_id, split="test", **rel))
        provenance[case_id] = prov
    if class_names is None:
        class_names = ["background"] + [f"class{c}" for c in range(1, template.num_classes)]
    manifest = DatasetManifest(entries, template.num_classes, class_names, template.spacing, out_dir)
    manifest.save(out_dir / "manifest.json")
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return manifest
