"""Dice and surface Dice evaluation.

Surfaces are represented by voxel boundary faces: every face separating a
foreground voxel from background (or from outside the grid) contributes its
centre point and its physical area. Surface Dice at tolerance ``tau`` is the
area of each surface lying within ``tau`` of the other surface, summed over
both directions, divided by the total area of both surfaces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

# distances within this many mm of tau count as inside the tolerance
DIST_TOL = 1e-9


@dataclass
class Surface:
    centers: np.ndarray  # (n, 3) in mm
    areas: np.ndarray  # (n,)
    axes: np.ndarray  # (n,) normal axis of each face

    def __len__(self):
        return len(self.areas)

    @property
    def total_area(self):
        return float(self.areas.sum())


def _as_mask(labels, class_id):
    labels = np.asarray(labels)
    return labels == class_id if class_id is not None else labels.astype(bool)


def dice_score(pred, gt, class_id=1, empty_score=1.0):
    """Hard Dice 2|A & B| / (|A| + |B|) for one class.

    Both masks empty gives ``empty_score`` (1 by default, ``nan`` to skip);
    exactly one empty gives 0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a, b = pred == class_id, gt == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return float(empty_score)
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)) -> Surface:
    mask = np.asarray(mask, dtype=bool)
    spacing = np.asarray(spacing, dtype=np.float64)
    centers, areas, axes = [], [], []
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        m = np.pad(mask, pad)
        lo = np.take(m, range(0, m.shape[axis] - 1), axis=axis)
        hi = np.take(m, range(1, m.shape[axis]), axis=axis)
        idx = np.argwhere(lo != hi).astype(np.float64)
        # face i along `axis` separates voxels i-1 and i: centre at i - 0.5
        idx[:, axis] -= 0.5
        centers.append(idx * spacing)
        others = [s for k, s in enumerate(spacing) if k != axis]
        areas.append(np.full(len(idx), others[0] * others[1]))
        axes.append(np.full(len(idx), axis))
    return Surface(np.concatenate(centers), np.concatenate(areas), np.concatenate(axes).astype(np.int8))


def _distances_edt(src: Surface, dst: Surface, lo, shape, spacing):
    """Distance from each ``src`` face centre to the nearest ``dst`` face centre.

    Face centres sit on a half-voxel lattice, so an exact Euclidean distance
    transform over a grid of doubled resolution answers all queries at once.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    grid_shape = tuple(2 * s + 1 for s in shape)
    field_ = np.ones(grid_shape, dtype=bool)
    dst_idx = np.rint(2 * (dst.centers / spacing - lo) + 1).astype(np.int64)
    field_[tuple(dst_idx.T)] = False
    dist = ndimage.distance_transform_edt(field_, sampling=spacing / 2)
    src_idx = np.rint(2 * (src.centers / spacing - lo) + 1).astype(np.int64)
    return dist[tuple(src_idx.T)]


def _distances_brute(src: Surface, dst: Surface, chunk=2048):
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        d = src.centers[i : i + chunk, None, :] - dst.centers[None, :, :]
        out[i : i + chunk] = np.sqrt((d**2).sum(-1)).min(axis=1)
    return out


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0), method="edt"):
    """Per-face distances of surface(a) to surface(b) and back, plus both surfaces."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = a | b
    if not union.any():
        raise ValueError("both masks are empty")
    nz = np.argwhere(union)
    lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
    crop = tuple(slice(l, h) for l, h in zip(lo, hi))
    sa = extract_surface(a[crop], spacing)
    sb = extract_surface(b[crop], spacing)
    if method == "edt":
        shape = tuple(hi - lo)
        d_ab = _distances_edt(sa, sb, 0, shape, spacing) if len(sb) else np.full(len(sa), np.inf)
        d_ba = _distances_edt(sb, sa, 0, shape, spacing) if len(sa) else np.full(len(sb), np.inf)
    elif method == "brute":
        d_ab = _distances_brute(sa, sb) if len(sb) else np.full(len(sa), np.inf)
        d_ba = _distances_brute(sb, sa) if len(sa) else np.full(len(sb), np.inf)
    else:
        raise ValueError(f"unknown method {method!r}")
    return sa, sb, d_ab, d_ba


def surface_dice(pred, gt, class_id=1, tau=1.2, spacing=(1.2, 1.2, 1.2), method="edt", empty_score=1.0):
    """Symmetric surface overlap at tolerance ``tau`` (mm) for one class."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    a, b = pred == class_id, gt == class_id
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return float(empty_score)
    if ea or eb:
        return 0.0
    sa, sb, d_ab, d_ba = surface_distances(a, b, spacing, method)
    inside = sa.areas[d_ab <= tau + DIST_TOL].sum() + sb.areas[d_ba <= tau + DIST_TOL].sum()
    return float(inside / (sa.total_area + sb.total_area))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvaluationReport:
    rows: list
    tau: float
    class_names: dict
    method: str = "model"
    empty_score: float = 1.0

    def _values(self, key, class_id=None):
        vals = [r[key] for r in self.rows if class_id is None or r["class_id"] == class_id]
        vals = [v for v in vals if not np.isnan(v)]
        return vals

    def mean(self, key, class_id=None):
        vals = self._values(key, class_id)
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def class_ids(self):
        return sorted({r["class_id"] for r in self.rows})

    @property
    def case_ids(self):
        return sorted({r["case_id"] for r in self.rows})

    def per_class(self):
        return [
            {
                "class_id": c,
                "class_name": self.class_names.get(c, str(c)),
                "dsc": self.mean("dsc", c),
                "sdsc": self.mean("sdsc", c),
            }
            for c in self.class_ids
        ]

    def to_dict(self):
        return {
            "method": self.method,
            "tau_mm": self.tau,
            "empty_score": self.empty_score,
            "cases": self.case_ids,
            "rows": self.rows,
            "per_class": self.per_class(),
            "mean": {"dsc": self.mean("dsc"), "sdsc": self.mean("sdsc")},
        }

    def render(self):
        """Summary row in the method / DSC / SDSC layout, then the per-class breakdown."""
        lines = [render_table([self]), "", f"per class (tau = {self.tau:g} mm):"]
        width = max([len("class")] + [len(r["class_name"]) for r in self.per_class()])
        lines.append(f"{'class'.ljust(width)}  {'DSC':>6}  {'SDSC':>6}")
        for r in self.per_class():
            lines.append(f"{r['class_name'].ljust(width)}  {r['dsc']:6.3f}  {r['sdsc']:6.3f}")
        return "\n".join(lines)

    def save(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        stem.with_suffix(".txt").write_text(self.render() + "\n")


def render_table(reports):
    width = max([len("Method")] + [len(r.method) for r in reports])
    lines = [f"{'Method'.ljust(width)} | {'DSC':>6} | {'SDSC':>6}", f"{'-' * width}-+-{'-' * 6}-+-{'-' * 6}"]
    for r in reports:
        lines.append(f"{r.method.ljust(width)} | {r.mean('dsc'):6.3f} | {r.mean('sdsc'):6.3f}")
    return "\n".join(lines)


def evaluate_cases(preds: dict, gts: dict, classes, tau=1.2, class_names=None, method="model",
                   empty_score=1.0) -> EvaluationReport:
    """Score every case x class.

    Args:
        preds, gts: ``case_id -> (labels, spacing)``; spacing of the ground truth is used.
        classes: foreground class ids to score.
        class_names: list indexed by class id, or mapping.
    """
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise KeyError(f"cases without a counterpart: {missing}")
    if isinstance(class_names, (list, tuple)):
        names = {i: n for i, n in enumerate(class_names)}
    else:
        names = dict(class_names or {})
    rows = []
    for cid in sorted(gts):
        gt, spacing = gts[cid]
        pred, _ = preds[cid]
        for c in classes:
            rows.append(
                {
                    "case_id": cid,
                    "class_id": int(c),
                    "class_name": names.get(c, str(c)),
                    "dsc": dice_score(pred, gt, c, empty_score),
                    "sdsc": surface_dice(pred, gt, c, tau, spacing, empty_score=empty_score),
                }
            )
    return EvaluationReport(rows, float(tau), {int(c): names.get(c, str(c)) for c in classes}, method, empty_score)
