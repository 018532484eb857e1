"""Ortho-slice PNGs with label contours drawn over one modality."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# fixed palette, class 1 first; cycles for larger class counts
PALETTE = np.array(
    [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
    ],
    dtype=np.uint8,
)


def contour_mask(labels2d):
    """Foreground pixels whose 4-neighbourhood contains a different label."""
    lab = np.asarray(labels2d)
    edge = np.zeros(lab.shape, dtype=bool)
    padded = np.pad(lab, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dx : padded.shape[0] - 1 + dx, 1 + dy : padded.shape[1] - 1 + dy]
        edge |= nb != center
    return edge & (lab > 0)


def render_slice(volume, labels, axis, index, lo=None, hi=None):
    """RGB uint8 image of one slice, x running left to right when it is in-plane."""
    volume = np.asarray(volume, dtype=np.float64)
    if not 0 <= index < volume.shape[axis]:
        raise IndexError(f"slice {index} out of range for axis {'xyz'[axis]} of size {volume.shape[axis]}")
    lo = float(volume.min()) if lo is None else lo
    hi = float(volume.max()) if hi is None else hi
    img = np.take(volume, index, axis=axis)
    gray = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    gray = np.clip(np.rint(gray * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if labels is not None:
        lab = np.take(np.asarray(labels), index, axis=axis)
        edge = contour_mask(lab)
        colors = PALETTE[(lab[edge].astype(np.int64) - 1) % len(PALETTE)]
        rgb[edge] = colors
    # rows = second in-plane axis, columns = first
    return np.ascontiguousarray(np.transpose(rgb, (1, 0, 2)))


def plot_overlay(volume, labels, out_dir, axis="z", slices=None, prefix="slice"):
    """Write one PNG per requested slice; returns the file paths.

    ``labels`` may be a label grid ``(X, Y, Z)``, a probability map
    ``(C, X, Y, Z)`` (argmax is drawn) or None for the bare modality.
    """
    ax = "xyz".index(axis) if isinstance(axis, str) else int(axis)
    volume = np.asarray(volume)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.ndim == 4:
            labels = np.argmax(labels, axis=0)
        if labels.shape != volume.shape:
            raise ValueError(f"labels {labels.shape} not aligned with volume {volume.shape}")
    if slices is None:
        slices = [volume.shape[ax] // 2]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(volume.min()), float(volume.max())
    paths = []
    for idx in slices:
        rgb = render_slice(volume, labels, ax, int(idx), lo, hi)
        path = out_dir / f"{prefix}_{'xyz'[ax]}{int(idx):03d}.png"
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)
        paths.append(path)
    return paths
