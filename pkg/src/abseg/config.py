"""Run configuration: one JSON file holding every module's settings.

Task presets only fill in the flip policy. ``task2`` drops flips along x,
both for mirror augmentation and for test-time augmentation, because a
left-right flip swaps paired structures.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .inference import InferenceConfig
from .losses import LossConfig
from .network import NetworkSpec
from .preprocess import AugmentationPolicy, PreprocessConfig
from .trainer import TrainingConfig

TASK_PRESETS = {
    "task1": {"flip_axes": ("x", "y", "z")},
    "task2": {"flip_axes": ("y", "z")},
    "custom": {},
}


@dataclass
class MetricsConfig:
    tau: float = 1.2
    # score when a class is absent from both prediction and reference; null -> skipped
    empty_score: Optional[float] = 1.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.empty_score is None:
            self.empty_score = float("nan")


@dataclass
class RunConfig:
    task: str = "task1"
    num_classes: int = 4
    # shared by mirror augmentation and flip TTA; None takes the task preset
    flip_axes: Optional[tuple] = None
    folds: int = 5
    network: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    expanded: bool = False

    def __post_init__(self):
        if self.task not in TASK_PRESETS:
            raise ValueError(f"unknown task preset {self.task!r}; choose from {sorted(TASK_PRESETS)}")
        if self.flip_axes is not None:
            self.flip_axes = tuple(self.flip_axes)

    def expand(self) -> "RunConfig":
        """Resolve the preset into explicit values and propagate shared keys."""
        run = copy.deepcopy(self)
        preset = TASK_PRESETS[run.task]
        if run.flip_axes is None:
            run.flip_axes = tuple(preset.get("flip_axes", ("x", "y", "z")))
        elif run.task != "custom" and "flip_axes" in preset and tuple(run.flip_axes) != preset["flip_axes"]:
            raise ValueError(
                f"flip_axes {run.flip_axes} contradicts preset {run.task} ({preset['flip_axes']}); use task 'custom'"
            )
        run.augmentation.mirror_axes = tuple(run.flip_axes)
        run.network = NetworkSpec.from_dict({**run.network.to_dict(), "num_classes": run.num_classes})
        run.expanded = True
        return run

    def to_dict(self):
        d = {
            "task": self.task,
            "num_classes": self.num_classes,
            "flip_axes": list(self.flip_axes) if self.flip_axes is not None else None,
            "folds": self.folds,
            "network": self.network.to_dict(),
            "expanded": self.expanded,
        }
        for name in ("loss", "training", "augmentation", "preprocess", "inference", "metrics"):
            d[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sections = {
            "network": NetworkSpec,
            "loss": LossConfig,
            "training": TrainingConfig,
            "augmentation": AugmentationPolicy,
            "preprocess": PreprocessConfig,
            "inference": InferenceConfig,
            "metrics": MetricsConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        for name, klass in sections.items():
            if name in d:
                sub = dict(d[name])
                bad = sorted(set(sub) - {f.name for f in dataclasses.fields(klass)})
                if bad:
                    raise KeyError(f"unknown keys in config section {name!r}: {bad}")
                d[name] = klass(**sub)
        return cls(**d)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def load_run_config(path=None, **overrides) -> RunConfig:
    """Read a config file (or defaults), apply top-level overrides, expand presets."""
    run = RunConfig.load(path) if path else RunConfig()
    for k, v in overrides.items():
        if v is not None:
            setattr(run, k, v)
    if "task" in overrides and overrides["task"] is not None and overrides.get("flip_axes") is None:
        run.flip_axes = None
    return run.expand()
