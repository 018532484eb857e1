"""Volume and label I/O, dataset manifests and cross-validation folds.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``) through nibabel.
* A raw binary blob plus a JSON sidecar (``.bin`` / ``.json``). The sidecar
  records ``shape``, ``dtype``, ``spacing`` and ``order``; the only order
  written is ``"xyz-fastest-first"``, i.e. the x index varies fastest in the
  byte stream (Fortran order over the ``(x, y, z)`` array axes).

Arrays are always handled in ``(x, y, z)`` axis order, x being the
left-right axis that the flip policy refers to.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RAW_ORDER = "xyz-fastest-first"

SUPPORTED_DTYPES = ("uint8", "int8", "uint16", "int16", "int32", "int64", "float32", "float64")

MODALITIES = ("ct", "t1ce", "flair")


class VolumeIOError(ValueError):
    """Raised when a volume file is malformed or unsupported."""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{path}: [{field}] {message}")


# ---------------------------------------------------------------------------
# domain types


@dataclass
class MultiModalVolume:
    ct: np.ndarray
    t1ce: np.ndarray
    flair: np.ndarray
    spacing: tuple = (1.2, 1.2, 1.2)
    case_id: str = ""

    def __post_init__(self):
        shapes = {self.ct.shape, self.t1ce.shape, self.flair.shape}
        if len(shapes) != 1:
            raise ValueError(
                f"modality shapes differ: ct={self.ct.shape} t1ce={self.t1ce.shape} flair={self.flair.shape}"
            )
        if self.ct.ndim != 3:
            raise ValueError(f"expected 3D grids, got shape {self.ct.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def shape(self):
        return self.ct.shape


@dataclass
class LabelMap:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must have an integer dtype, got {self.labels.dtype}")
        if self.labels.size:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= self.num_classes:
                raise ValueError(
                    f"label values must lie in [0, {self.num_classes - 1}], found range [{lo}, {hi}]"
                )

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class ManifestEntry:
    case_id: str
    ct: Optional[str] = None
    t1ce: Optional[str] = None
    flair: Optional[str] = None
    label: Optional[str] = None
    split: str = "train"
    # preprocessed 3-channel image, filled in by the preprocess step
    image: Optional[str] = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class DatasetManifest:
    """List of cases; relative paths are resolved against ``root``."""

    entries: list = field(default_factory=list)
    num_classes: int = 2
    class_names: Optional[list] = None
    spacing: tuple = (1.2, 1.2, 1.2)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.case_id for e in self.entries]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate case ids in manifest: {dupes}")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValueError(f"case {e.case_id}: split must be 'train' or 'test', got {e.split!r}")
            if e.split == "train" and e.label is None:
                raise ValueError(f"train case {e.case_id} has no label path")
        if self.class_names is None:
            self.class_names = ["background"] + [f"class{i}" for i in range(1, self.num_classes)]

    def resolve(self, rel):
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def get(self, case_id):
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(case_id)

    def subset(self, case_ids=None, split=None):
        keep = [
            e
            for e in self.entries
            if (case_ids is None or e.case_id in case_ids) and (split is None or e.split == split)
        ]
        return DatasetManifest(keep, self.num_classes, list(self.class_names), self.spacing, self.root)

    @property
    def case_ids(self):
        return [e.case_id for e in self.entries]

    def train_ids(self):
        return [e.case_id for e in self.entries if e.split == "train"]

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "spacing": list(self.spacing),
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in data["entries"]]
        return cls(
            entries,
            int(data["num_classes"]),
            data.get("class_names"),
            tuple(data.get("spacing", (1.2, 1.2, 1.2))),
            path.parent,
        )


@dataclass
class FoldAssignment:
    k: int
    fold_of: dict

    def members(self, fold):
        return sorted(c for c, f in self.fold_of.items() if f == fold)

    def train_ids(self, fold):
        return sorted(c for c, f in self.fold_of.items() if f != fold)

    def sizes(self):
        return [len(self.members(i)) for i in range(self.k)]


# ---------------------------------------------------------------------------
# low-level formats


def _detect_format(path):
    name = str(path).lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti1"
    if name.endswith(".json") or name.endswith(".bin"):
        return "raw+json"
    raise VolumeIOError(path, "format", "cannot infer format from extension (.nii, .nii.gz, .bin, .json)")


def _raw_pair(path):
    p = Path(path)
    if p.suffix.lower() in (".json", ".bin"):
        p = p.with_suffix("")
    return p.parent / (p.name + ".bin"), p.parent / (p.name + ".json")


def _check_dtype(path, dtype):
    try:
        dt = np.dtype(dtype)
    except TypeError:
        raise VolumeIOError(path, "dtype", f"unknown datatype {dtype!r}") from None
    if dt.name not in SUPPORTED_DTYPES:
        raise VolumeIOError(path, "dtype", f"unsupported datatype {dt}")
    return dt


def load_volume(path, format=None):
    """Load a grid and its spacing.

    Args:
        path: ``.nii``/``.nii.gz`` file, or either half of a ``.bin``/``.json`` pair.
        format: ``"nifti1"`` or ``"raw+json"``; inferred from the extension when omitted.

    Returns:
        ``(grid, spacing)`` with grid in ``(x, y, z[, ...])`` axis order.
    """
    fmt = format or _detect_format(path)
    if fmt == "nifti1":
        return _load_nifti(Path(path))
    if fmt == "raw+json":
        return _load_raw(Path(path))
    raise VolumeIOError(path, "format", f"unknown format {fmt!r}")


def save_volume(grid, path, spacing=(1.0, 1.0, 1.0), format=None):
    fmt = format or _detect_format(path)
    grid = np.asarray(grid)
    _check_dtype(path, grid.dtype)
    spacing = tuple(float(s) for s in spacing)
    if min(spacing) <= 0:
        raise VolumeIOError(path, "spacing", f"spacing must be positive, got {spacing}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if fmt == "nifti1":
        _save_nifti(grid, Path(path), spacing)
    elif fmt == "raw+json":
        _save_raw(grid, Path(path), spacing)
    else:
        raise VolumeIOError(path, "format", f"unknown format {fmt!r}")


def _save_raw(grid, path, spacing):
    bin_path, json_path = _raw_pair(path)
    dt = grid.dtype.newbyteorder("<")
    header = {
        "shape": list(grid.shape),
        "dtype": dt.str,
        "spacing": list(spacing),
        "order": RAW_ORDER,
    }
    with open(bin_path, "wb") as fh:
        fh.write(np.asarray(grid, dtype=dt).tobytes(order="F"))
    json_path.write_text(json.dumps(header, indent=2) + "\n")


def _load_raw(path):
    bin_path, json_path = _raw_pair(path)
    for p in (json_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"missing file: {p}")
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(json_path, "header", f"invalid JSON ({exc})") from None
    for key in ("shape", "dtype"):
        if key not in header:
            raise VolumeIOError(json_path, key, "missing from sidecar")
    order = header.get("order", RAW_ORDER)
    if order != RAW_ORDER:
        raise VolumeIOError(json_path, "order", f"unsupported order {order!r}, expected {RAW_ORDER!r}")
    dt = _check_dtype(json_path, header["dtype"])
    shape = tuple(int(s) for s in header["shape"])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeIOError(
            bin_path, "shape", f"shape {shape} x {dt} needs {expected} bytes, file has {len(raw)}"
        )
    grid = np.frombuffer(raw, dtype=dt).reshape(shape, order="F")
    grid = np.ascontiguousarray(grid.astype(dt.newbyteorder("="), copy=False))
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    return grid, spacing


def _save_nifti(grid, path, spacing):
    import nibabel as nib

    affine = np.diag(list(spacing[:3]) + [1.0])
    img = nib.Nifti1Image(grid, affine)
    img.header.set_data_dtype(grid.dtype)
    zooms = list(spacing[:3]) + [1.0] * (grid.ndim - 3)
    img.header.set_zooms(zooms[: grid.ndim])
    nib.save(img, str(path))


def _load_nifti(path):
    import nibabel as nib

    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeIOError(path, "header", f"not a readable NIfTI-1 file ({exc})") from None
    dt = img.header.get_data_dtype()
    _check_dtype(path, dt)
    slope, inter = img.header.get_slope_inter()
    if slope not in (None, 1.0) or inter not in (None, 0.0):
        grid = np.asarray(img.get_fdata(dtype=np.float64))
    else:
        grid = np.asanyarray(img.dataobj).astype(dt.newbyteorder("="), copy=False)
    # reorient to (x, y, z) index order if the affine permutes axes
    ornt = nib.orientations.io_orientation(img.affine)
    perm = [int(a) for a in ornt[:3, 0]]
    if perm != [0, 1, 2] and grid.ndim >= 3:
        grid = np.transpose(grid, np.argsort(perm).tolist() + list(range(3, grid.ndim)))
    zooms = img.header.get_zooms()[:3]
    spacing = tuple(float(zooms[i]) for i in np.argsort(perm)) if perm != [0, 1, 2] else tuple(
        float(z) for z in zooms
    )
    return np.ascontiguousarray(grid), spacing


# ---------------------------------------------------------------------------
# labels and multi-modal volumes


def save_labelmap(labels, path, spacing=(1.0, 1.0, 1.0)):
    if not isinstance(labels, LabelMap):
        raise TypeError("save_labelmap expects a LabelMap")
    target = Path(path)
    if target.parent.exists() and not os.access(target.parent, os.W_OK):
        raise PermissionError(f"unwritable path: {target}")
    save_volume(labels.labels, target, spacing)


def load_labelmap(path, num_classes):
    grid, spacing = load_volume(path)
    if not np.issubdtype(grid.dtype, np.integer):
        raise VolumeIOError(path, "dtype", f"label file must hold integers, found {grid.dtype}")
    return LabelMap(grid, int(num_classes)), spacing


def load_case(manifest, entry):
    """Read the three modalities of one manifest entry."""
    grids = []
    spacing = None
    for mod in MODALITIES:
        rel = getattr(entry, mod)
        if rel is None:
            raise VolumeIOError(entry.case_id, mod, "modality path missing from manifest")
        grid, spacing = load_volume(manifest.resolve(rel))
        grids.append(grid)
    return MultiModalVolume(*grids, spacing=spacing, case_id=entry.case_id)


def save_case(volume, directory, format="raw+json"):
    ext = ".json" if format == "raw+json" else ".nii.gz"
    paths = {}
    for mod in MODALITIES:
        p = Path(directory) / f"{volume.case_id}_{mod}{ext}"
        save_volume(getattr(volume, mod), p, volume.spacing, format)
        paths[mod] = p
    return paths


# ---------------------------------------------------------------------------
# folds


def make_folds(manifest: DatasetManifest | Sequence[str], k: int, seed: int) -> FoldAssignment:
    """Assign train cases to ``k`` folds.

    Case ids are sorted, shuffled with a seeded Fisher-Yates permutation and
    dealt round-robin, so the result does not depend on input order.
    """
    if isinstance(manifest, DatasetManifest):
        ids = manifest.train_ids()
    else:
        ids = list(manifest)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} train cases, got {len(ids)}")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    fold_of = {ordered[j]: pos % k for pos, j in enumerate(perm)}
    return FoldAssignment(k, fold_of)
