"""Intensity preprocessing, patch sampling and data augmentation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume_io import LabelMap, MultiModalVolume, load_case, load_labelmap, load_volume

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def axis_indices(names):
    """Map axis names such as ``("y", "z")`` to spatial indices ``(1, 2)``."""
    out = []
    for n in names:
        if n not in AXIS_INDEX:
            raise ValueError(f"unknown axis {n!r}; expected a subset of x, y, z")
        out.append(AXIS_INDEX[n])
    return tuple(sorted(set(out)))


@dataclass
class AugmentationPolicy:
    rotation_deg: tuple = (-30.0, 30.0)
    p_rotation: float = 0.2
    scale_range: tuple = (0.85, 1.25)
    p_scale: float = 0.2
    mirror_axes: tuple = ("x", "y", "z")
    p_mirror: float = 0.5
    gamma_range: tuple = (0.7, 1.5)
    p_gamma: float = 0.3
    brightness_sigma: float = 0.1
    p_brightness: float = 0.15

    def __post_init__(self):
        self.rotation_deg = tuple(float(v) for v in self.rotation_deg)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.mirror_axes = tuple(self.mirror_axes)
        for name in ("rotation_deg", "scale_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (lo <= hi), got {(lo, hi)}")
        if self.scale_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise ValueError("scale and gamma ranges must be positive")
        if self.brightness_sigma < 0:
            raise ValueError("brightness_sigma must be >= 0")
        for name in ("p_rotation", "p_scale", "p_mirror", "p_gamma", "p_brightness"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        axis_indices(self.mirror_axes)

    @classmethod
    def identity(cls):
        return cls(p_rotation=0.0, p_scale=0.0, p_mirror=0.0, p_gamma=0.0, p_brightness=0.0)


@dataclass
class PreprocessConfig:
    # CT clipping band as intensity quantiles (0.5 % and 99.5 %)
    ct_clip: tuple = (0.005, 0.995)

    def __post_init__(self):
        self.ct_clip = tuple(float(q) for q in self.ct_clip)
        lo, hi = self.ct_clip
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"ct_clip must satisfy 0 <= lo < hi <= 1, got {self.ct_clip}")


@dataclass
class PatchBatch:
    inputs: np.ndarray
    targets: np.ndarray
    origins: list = field(default_factory=list)

    def __post_init__(self):
        if self.inputs.ndim != 5 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be (B, C, X, Y, Z) with B >= 1, got {self.inputs.shape}")
        if self.targets.shape != (self.inputs.shape[0],) + self.inputs.shape[2:]:
            raise ValueError(f"targets shape {self.targets.shape} does not match inputs {self.inputs.shape}")


# ---------------------------------------------------------------------------
# intensity


def quantile(values, q):
    """Sort-based quantile with linear interpolation between order statistics."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def clip_ct(grid, lo_q=0.005, hi_q=0.995):
    grid = np.asarray(grid)
    if grid.size == 0:
        raise ValueError("cannot clip an empty grid")
    if not 0.0 <= lo_q < hi_q <= 1.0:
        raise ValueError(f"need 0 <= lo_q < hi_q <= 1, got {(lo_q, hi_q)}")
    lo, hi = np.quantile(grid.astype(np.float64), [lo_q, hi_q], method="linear")
    return np.clip(grid, lo, hi).astype(grid.dtype, copy=False)


def znormalize(grid):
    """Subtract the mean and divide by the population standard deviation.

    Computed in float64. A zero-variance grid yields zeros and a warning.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.size < 2:
        raise ValueError("znormalize needs at least two voxels")
    mean = g.mean()
    std = g.std()
    if not np.isfinite(std) or std <= np.finfo(np.float64).eps * max(1.0, abs(mean)):
        warnings.warn("zero-variance grid passed to znormalize; returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(g)
    return (g - mean) / std


def stack_modalities(volume: MultiModalVolume):
    if not volume.ct.shape == volume.t1ce.shape == volume.flair.shape:
        raise ValueError("modality shapes differ")
    return np.stack([volume.ct, volume.t1ce, volume.flair], axis=0)


def preprocess_volume(volume: MultiModalVolume, lo_q=0.005, hi_q=0.995, dtype=np.float32):
    """CT clipping, per-modality z-scoring, then channel stacking (CT, T1ce, FLAIR)."""
    ct = znormalize(clip_ct(volume.ct, lo_q, hi_q))
    t1 = znormalize(volume.t1ce)
    fl = znormalize(volume.flair)
    out = np.stack([ct, t1, fl], axis=0).astype(dtype)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"case {volume.case_id}: non-finite values after preprocessing")
    return out


def load_image(manifest, entry, cfg: PreprocessConfig = PreprocessConfig()):
    """Network input for a manifest entry: the stored preprocessed image if any, else computed."""
    if entry.image is not None:
        image, spacing = load_volume(manifest.resolve(entry.image))
        return image.astype(np.float32, copy=False), spacing
    volume = load_case(manifest, entry)
    return preprocess_volume(volume, *cfg.ct_clip), volume.spacing


def load_training_case(manifest, entry, cfg: PreprocessConfig = PreprocessConfig()):
    """``(image, labels, spacing)`` for a labelled manifest entry."""
    image, spacing = load_image(manifest, entry, cfg)
    if entry.label is None:
        raise ValueError(f"case {entry.case_id} has no label")
    labels, _ = load_labelmap(manifest.resolve(entry.label), manifest.num_classes)
    if labels.shape != image.shape[1:]:
        raise ValueError(f"case {entry.case_id}: label shape {labels.shape} != image shape {image.shape[1:]}")
    return image, labels.labels, spacing


# ---------------------------------------------------------------------------
# patches


def pad_to(image, labels, patch):
    """Edge-pad (symmetrically) so every spatial axis is at least ``patch``."""
    spatial = image.shape[1:]
    pads = []
    for ext, p in zip(spatial, patch):
        total = max(0, p - ext)
        pads.append((total // 2, total - total // 2))
    if not any(a or b for a, b in pads):
        return image, labels, pads
    image = np.pad(image, [(0, 0)] + pads, mode="edge")
    if labels is not None:
        labels = np.pad(labels, pads, mode="edge")
    return image, labels, pads


def sample_patch(image, labels, patch, rng, fg_bias=0.33):
    """Crop one training window.

    With probability ``fg_bias`` (and when foreground exists) the window is
    centred so that it contains a randomly chosen foreground voxel.

    Returns:
        ``(image_patch, label_patch, origin)``; origin is in padded coordinates.
    """
    if isinstance(labels, LabelMap):
        labels = labels.labels
    patch = tuple(int(p) for p in patch)
    image, labels, _ = pad_to(image, labels, patch)
    spatial = image.shape[1:]
    use_fg = rng.random() < fg_bias
    origin = None
    if use_fg:
        fg = np.flatnonzero(labels > 0)
        if fg.size:
            voxel = np.unravel_index(fg[rng.integers(fg.size)], spatial)
            origin = tuple(
                int(rng.integers(max(0, v - p + 1), min(v, ext - p) + 1))
                for v, p, ext in zip(voxel, patch, spatial)
            )
    if origin is None:
        origin = tuple(int(rng.integers(0, ext - p + 1)) for ext, p in zip(spatial, patch))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return image[(slice(None),) + sl].copy(), labels[sl].copy(), origin


def sample_batch(cases, patch, batch_size, seed, step, fg_bias=0.33, policy=None):
    """Draw a batch for one optimisation step.

    Every sample gets its own generator seeded from ``(seed, step, index)``, so
    the batch is independent of worker layout and of resumption.
    """
    inputs, targets, origins = [], [], []
    for i in range(batch_size):
        rng = np.random.default_rng([seed, step, i])
        image, labels = cases[int(rng.integers(len(cases)))]
        x, y, origin = sample_patch(image, labels, patch, rng, fg_bias)
        if policy is not None:
            x, y = augment(x, y, policy, rng)
        inputs.append(x)
        targets.append(y)
        origins.append(origin)
    return PatchBatch(np.stack(inputs), np.stack(targets), origins)


# ---------------------------------------------------------------------------
# augmentation


def _rotation_matrix(angles):
    ax, ay, az = np.deg2rad(angles)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def gamma_correct(channel, gamma):
    """Apply ``v ** gamma`` on a min-max rescaled copy, then undo the rescale."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi - lo <= 0:
        return channel.copy()
    r = (channel - lo) / (hi - lo)
    return (np.power(r, gamma) * (hi - lo) + lo).astype(channel.dtype, copy=False)


def augment(image, labels, policy: AugmentationPolicy, rng):
    """Random rotation/scale, mirroring, gamma and additive brightness.

    Spatial operations act on ``image`` (trilinear) and ``labels`` (nearest)
    identically; intensity operations touch ``image`` only.
    """
    image = np.array(image, copy=True)
    labels = np.array(labels, copy=True)
    spatial = image.shape[1:]

    matrix = np.eye(3)
    spatial_change = False
    if rng.random() < policy.p_rotation:
        angles = rng.uniform(policy.rotation_deg[0], policy.rotation_deg[1], size=3)
        matrix = _rotation_matrix(angles) @ matrix
        spatial_change = True
    if rng.random() < policy.p_scale:
        s = rng.uniform(*policy.scale_range)
        # zooming in by s means sampling the source at coordinates / s
        matrix = matrix / s
        spatial_change = True
    if spatial_change:
        center = (np.array(spatial, dtype=np.float64) - 1) / 2
        offset = center - matrix @ center
        image = np.stack(
            [
                ndimage.affine_transform(c, matrix, offset, order=1, mode="nearest")
                for c in image
            ]
        ).astype(image.dtype, copy=False)
        labels = ndimage.affine_transform(labels, matrix, offset, order=0, mode="nearest").astype(
            labels.dtype, copy=False
        )

    for ax in axis_indices(policy.mirror_axes):
        if rng.random() < policy.p_mirror:
            image = np.flip(image, axis=ax + 1)
            labels = np.flip(labels, axis=ax)

    if rng.random() < policy.p_gamma:
        g = rng.uniform(*policy.gamma_range)
        image = np.stack([gamma_correct(c, g) for c in image])

    if rng.random() < policy.p_brightness:
        shifts = rng.normal(0.0, 1.0, size=image.shape[0])
        image = np.stack(
            [c + s * policy.brightness_sigma * float(c.std()) for c, s in zip(image, shifts)]
        ).astype(image.dtype, copy=False)

    return np.ascontiguousarray(image), np.ascontiguousarray(labels)
