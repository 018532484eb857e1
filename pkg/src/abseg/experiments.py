"""Desk-scale experiments: overfit smoke run and the mirrored-pair flip probe."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import inference, metrics, pipeline, synthdata, trainer
from .config import RunConfig
from .losses import LossConfig
from .network import NetworkSpec
from .preprocess import preprocess_volume

log = logging.getLogger(__name__)

TINY_FILTERS = (4, 8, 16, 32, 40)


def smoke_config(num_classes=5, steps=2, patch=(16, 16, 16), task="task1", lr0=0.01, momentum=0.9,
                 aggregation="global", augment=True, **training) -> RunConfig:
    """Expanded run config with the tiny network and a short, constant-rate schedule."""
    d = RunConfig(task=task, num_classes=num_classes).to_dict()
    d["network"]["filters_per_level"] = list(TINY_FILTERS)
    d["loss"]["dice_aggregation"] = aggregation
    d["training"].update(
        dict(lr0=lr0, momentum=momentum, epochs=1, steps_per_epoch=max(steps, 1), batch_size=1,
             patch_size=list(patch), max_steps=steps, checkpoint_every=max(steps, 1)),
        **training,
    )
    d["inference"]["patch_size"] = list(patch)
    if not augment:
        for k in ("p_rotation", "p_scale", "p_mirror", "p_gamma", "p_brightness"):
            d["augmentation"][k] = 0.0
    return RunConfig.from_dict(d).expand()


def overfit_smoke(out_dir, steps=200, size=32, seed=0, lr0=0.1, momentum=0.9, aggregation="per-class-mean"):
    """Fit the tiny network to one phantom presented as the same full-volume batch every step.

    Returns per-class hard Dice on that batch after training.
    """
    vol, lab = synthdata.make_phantom(synthdata.PhantomSpec(size=(size,) * 3, seed=seed))
    image = preprocess_volume(vol)
    spec = NetworkSpec(num_classes=lab.num_classes, filters_per_level=TINY_FILTERS)
    cfg = trainer.TrainingConfig(lr0=lr0, momentum=momentum, weight_decay=0.0, epochs=1, steps_per_epoch=steps,
                                 batch_size=1, patch_size=(size,) * 3, fg_bias=0.0, checkpoint_every=max(steps, 1),
                                 seed=seed)
    t0 = time.perf_counter()
    res = trainer.train(spec, cfg, LossConfig(dice_aggregation=aggregation), [(image, lab.labels)], out_dir)
    model = res.model.eval()
    with torch.no_grad():
        pred = model(torch.as_tensor(image[None]))[0].argmax(1)[0].numpy()
    per_class = [metrics.dice_score(pred, lab.labels, c) for c in range(1, lab.num_classes)]
    return {
        "steps": res.step,
        "seconds": time.perf_counter() - t0,
        "dice_per_class": per_class,
        "foreground_dice": float(np.mean(per_class)),
        "binary_foreground_dice": metrics.dice_score(pred > 0, lab.labels > 0, True),
        "first_loss": res.curve[0]["loss"] if res.curve else None,
        "last_loss": res.curve[-1]["loss"] if res.curve else None,
    }


def flip_probe(out_dir, n_train=4, n_test=2, size=32, steps=150, seed=0, lr0=0.1, momentum=0.9):
    """Train on mirrored-pair phantoms, then predict held-out cases with and without x-flip TTA.

    Training never mirrors along x, so the model can tell the left member
    from the right one by position. Returns mean Dice over the two paired
    classes for each TTA plan.
    """
    out_dir = Path(out_dir)
    manifest = pipeline.synth(out_dir / "data", n_train, seed, (size,) * 3, n_test, "mirrored", jitter=2)
    run = smoke_config(num_classes=3, steps=steps, patch=(size,) * 3, task="task2", lr0=lr0, momentum=momentum,
                       aggregation="per-class-mean", augment=False, weight_decay=0.0, fg_bias=0.0, seed=seed)
    pipeline.train(run, manifest, out_dir / "train")
    model = out_dir / "train" / "checkpoints" / "latest.npz"
    result = {}
    for name, axes in (("xyz", ("x", "y", "z")), ("yz", ("y", "z"))):
        r = RunConfig.from_dict({**run.to_dict(), "task": "custom", "flip_axes": list(axes)}).expand()
        pred_dir = out_dir / f"pred_{name}"
        pipeline.predict(r, manifest, [model], pred_dir, split="test")
        report = pipeline.evaluate(pred_dir, out_dir / "data", classes=[1, 2], method=f"TTA {name}")
        result[name] = {"mean_dice": report.mean("dsc"), "per_class": report.per_class(),
                        "transforms": len(inference.TTAPlan(axes).transforms)}
    (out_dir / "flip_probe.txt").write_text(
        "\n".join(f"{k}: {len(v['per_class'])} classes, {v['transforms']} transforms, mean DSC {v['mean_dice']:.4f}"
                  for k, v in result.items()) + "\n"
    )
    return result
