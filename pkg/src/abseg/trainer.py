"""SGD training with a poly learning-rate schedule, checkpointing and k-fold CV."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses, network
from .preprocess import AugmentationPolicy, sample_batch

log = logging.getLogger(__name__)

# pseudo-labelled batches draw from their own stream: seed + offset
PSEUDO_SEED_OFFSET = 7919


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; the last written checkpoint is kept."""


@dataclass
class TrainingConfig:
    lr0: float = 1e-4
    momentum: float = 0.99
    weight_decay: float = 1e-5
    epochs: int = 1000
    batch_size: int = 2
    poly_power: float = 0.9
    steps_per_epoch: int = 250
    seed: int = 0
    pseudo_enabled: bool = False
    nesterov: bool = False
    decay_norm_and_bias: bool = False
    checkpoint_every: int = 250
    patch_size: tuple = (128, 160, 112)
    fg_bias: float = 0.33
    # stop early (e.g. smoke runs); None trains epochs * steps_per_epoch steps
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.lr0 <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.steps_per_epoch <= 0:
            raise ValueError("lr0, epochs, batch_size and steps_per_epoch must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if not 0 < self.poly_power <= 2:
            raise ValueError(f"poly_power must lie in (0, 2], got {self.poly_power}")
        if self.checkpoint_every <= 0:
            raise ValueError("checkpoint_every must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @property
    def total_steps(self):
        full = self.epochs * self.steps_per_epoch
        return full if self.max_steps is None else min(full, self.max_steps)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0


def poly_lr(epoch, total_epochs, lr0=1e-4, power=0.9):
    """lr0 * (1 - epoch / total_epochs) ** power."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 - epoch / total_epochs) ** power


def decay_mask(model):
    """Names of parameters subject to weight decay: convolution kernels only."""
    return {n for n, p in model.named_parameters() if p.ndim > 1}


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr, momentum=0.99, weight_decay=1e-5,
             decay=None, nesterov=False):
    """One in-place SGD update with coupled L2 decay and heavy-ball momentum.

    For each parameter: ``g' = g + wd * w``, ``v = momentum * v + g'``,
    ``w = w - lr * v``. ``decay`` optionally restricts the L2 term to a subset
    of names.
    """
    if set(params) != set(grads):
        raise KeyError(
            f"gradient names do not match parameters; missing={sorted(set(params) - set(grads))} "
            f"unexpected={sorted(set(grads) - set(params))}"
        )
    bad = [n for n, g in grads.items() if not torch.isfinite(torch.as_tensor(g)).all()]
    if bad:
        raise TrainingDiverged(f"non-finite gradient for {bad}; step aborted")
    with torch.no_grad():
        for name, w in params.items():
            g = torch.as_tensor(grads[name], dtype=w.dtype)
            if weight_decay and (decay is None or name in decay):
                g = g + weight_decay * w
            v = state.velocity.get(name)
            v = g.clone() if v is None else momentum * v + g
            state.velocity[name] = v
            w -= lr * (g + momentum * v if nesterov else v)
    state.step += 1
    return params, state


@dataclass
class TrainResult:
    model: network.ResUNet
    checkpoints: list
    curve: list
    step: int


def _cases_to_tensors(batch, dtype):
    return torch.as_tensor(batch.inputs, dtype=dtype), torch.as_tensor(batch.targets, dtype=torch.long)


def step_loss(model, batch, loss_cfg, ds_weights, pseudo_batch=None):
    """Deep-supervised hybrid loss for one batch (+ pseudo batch); returns (total, components)."""
    dtype = next(model.parameters()).dtype
    x, y = _cases_to_tensors(batch, dtype)
    sup_levels = losses.level_hybrid_losses(model(x), y, loss_cfg)
    sup = losses.deep_supervised(sup_levels, ds_weights)
    comps = {"supervised": sup, "levels": sup_levels}
    total = sup
    if pseudo_batch is not None:
        xt, yt = _cases_to_tensors(pseudo_batch, dtype)
        pse = losses.deep_supervised(losses.level_hybrid_losses(model(xt), yt, loss_cfg), ds_weights)
        comps["pseudo"] = pse
        total = sup + pse
    return total, comps


def _read_curve(path):
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def train(spec: network.NetworkSpec, cfg: TrainingConfig, loss_cfg: losses.LossConfig, cases, out_dir,
          pseudo_cases=None, policy: Optional[AugmentationPolicy] = None, resume=None,
          dtype=torch.float32) -> TrainResult:
    """Run the optimisation loop.

    Args:
        cases: list of ``(image (3, X, Y, Z), labels (X, Y, Z))`` pairs.
        out_dir: receives ``checkpoints/step_XXXXXX.npz``, ``checkpoints/latest.npz``
            and the JSON-lines loss curve ``loss_curve.jsonl``.
        pseudo_cases: pseudo-labelled pairs; used when ``cfg.pseudo_enabled``.
        resume: checkpoint path to continue from.
    """
    if not cases:
        raise ValueError("no training cases")
    use_pseudo = bool(cfg.pseudo_enabled and pseudo_cases)
    if cfg.pseudo_enabled and not pseudo_cases:
        log.warning("pseudo training enabled but no pseudo-labelled cases given; supervised only")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "loss_curve.jsonl"

    ds_weights = list(loss_cfg.ds_weights) if loss_cfg.ds_weights else spec.ds_weights
    if len(ds_weights) != spec.deep_supervision_levels:
        raise ValueError(f"{len(ds_weights)} deep supervision weights for {spec.deep_supervision_levels} levels")

    state = OptimizerState()
    if resume is not None:
        ck = network.load_checkpoint(resume)
        if ck.spec != spec:
            raise ValueError("checkpoint network spec differs from the configured one")
        model = ck.to_model(dtype)
        state.step = ck.step
        state.velocity = {k: torch.as_tensor(v, dtype=dtype) for k, v in ck.velocity.items()}
        curve = [r for r in _read_curve(curve_path) if r["step"] < state.step]
        log.info("resumed from %s at step %d", resume, state.step)
    else:
        model = network.build(spec, cfg.seed, dtype=dtype)
        curve = []
    curve_path.write_text("".join(json.dumps(r) + "\n" for r in curve))

    def save(step):
        velocity = {k: v.detach().cpu().numpy() for k, v in state.velocity.items()}
        meta = {"epoch": step // cfg.steps_per_epoch}
        p = network.save_checkpoint(ckpt_dir / f"step_{step:06d}.npz", model, step=step, velocity=velocity, meta=meta)
        network.save_checkpoint(ckpt_dir / "latest.npz", model, step=step, velocity=velocity, meta=meta)
        return p

    checkpoints = []
    if resume is None:
        checkpoints.append(save(0))

    decay = None if cfg.decay_norm_and_bias else decay_mask(model)
    params = dict(model.named_parameters())
    total = cfg.total_steps
    model.train()
    with curve_path.open("a") as curve_fh:
        while state.step < total:
            step = state.step
            epoch = step // cfg.steps_per_epoch
            state.epoch = epoch
            lr = poly_lr(min(epoch, cfg.epochs), cfg.epochs, cfg.lr0, cfg.poly_power)
            batch = sample_batch(cases, cfg.patch_size, cfg.batch_size, cfg.seed, step, cfg.fg_bias, policy)
            pbatch = None
            if use_pseudo:
                pbatch = sample_batch(pseudo_cases, cfg.patch_size, cfg.batch_size, cfg.seed + PSEUDO_SEED_OFFSET, step,
                                      cfg.fg_bias, policy)
            loss, comps = step_loss(model, batch, loss_cfg, ds_weights, pbatch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}; last checkpoint kept in {ckpt_dir}")
            grads = network.gradients(model, loss)
            sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay, decay, cfg.nesterov)
            record = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss": float(loss.detach()),
                "components": {
                    "supervised": float(comps["supervised"].detach()),
                    "pseudo": float(comps["pseudo"].detach()) if "pseudo" in comps else None,
                    "levels": [float(v.detach()) for v in comps["levels"]],
                },
            }
            curve.append(record)
            curve_fh.write(json.dumps(record) + "\n")
            curve_fh.flush()
            if state.step % cfg.checkpoint_every == 0 or state.step == total:
                checkpoints.append(save(state.step))
            if step % max(1, cfg.steps_per_epoch) == 0:
                log.info("step %d epoch %d lr %.3e loss %.6f", step, epoch, lr, float(loss.detach()))
    return TrainResult(model, checkpoints, curve, state.step)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CrossValResult:
    checkpoints: list
    folds: object
    rows: list
    reports: list

    def table(self):
        lines = [f"{'fold':>4}  {'n_val':>5}  {'DSC':>6}  {'SDSC':>6}"]
        for r in self.rows:
            lines.append(f"{r['fold']:>4}  {r['n_val']:>5}  {r['dsc']:6.3f}  {r['sdsc']:6.3f}")
        return "\n".join(lines)


def run_cross_validation(run, manifest, k=5, out_dir="crossval"):
    """Train one model per fold on the other folds and score it on the held-out fold.

    ``run`` is an expanded run configuration (see :mod:`abseg.config`).
    """
    from . import inference, metrics
    from .preprocess import load_training_case
    from .volume_io import make_folds

    out_dir = Path(out_dir)
    folds = make_folds(manifest, k, run.training.seed)
    cache = {cid: load_training_case(manifest, manifest.get(cid), run.preprocess) for cid in manifest.train_ids()}
    plan = inference.TTAPlan(run.flip_axes)
    classes = list(range(1, manifest.num_classes))
    checkpoints, rows, reports = [], [], []
    for fold in range(k):
        fold_dir = out_dir / f"fold_{fold}"
        train_ids = folds.train_ids(fold)
        val_ids = folds.members(fold)
        log.info("fold %d: %d train / %d val cases", fold, len(train_ids), len(val_ids))
        result = train(run.network, run.training, run.loss, [cache[c][:2] for c in train_ids], fold_dir,
                       policy=run.augmentation)
        checkpoints.append(fold_dir / "checkpoints" / "latest.npz")
        preds, gts = {}, {}
        for cid in val_ids:
            image, labels, spacing = cache[cid]
            prob = inference.predict_volume([result.model], image, plan, run.inference.patch(run.training),
                                            run.inference.overlap, run.inference.weighting, case_id=cid)
            preds[cid] = (inference.argmax_labels(prob).labels, spacing)
            gts[cid] = (labels, spacing)
        report = metrics.evaluate_cases(preds, gts, classes, run.metrics.tau, manifest.class_names,
                                        method=f"fold {fold}", empty_score=run.metrics.empty_score)
        report.save(fold_dir / "report")
        reports.append(report)
        rows.append({"fold": fold, "n_val": len(val_ids), "dsc": report.mean("dsc"), "sdsc": report.mean("sdsc"),
                     "val_cases": val_ids})
    res = CrossValResult(checkpoints, folds, rows, reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out_dir / "summary.txt").write_text(res.table() + "\n")
    return res
