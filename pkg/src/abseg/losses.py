"""Segmentation objectives on softmax probabilities.

All reductions run over every voxel of every sample in the batch (index i)
and every class (index c). Probabilities ``p`` and one-hot targets ``y`` are
``(B, C, *spatial)`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    epsilon: float = 1e-5
    alpha: float = 0.3
    beta: float = 0.7
    dice_aggregation: str = "global"
    # 1.0 keeps the Dice numerator exactly as written in DC-CE; 2.0 gives the usual 2|A.B|/(|A|+|B|)
    dice_numerator_scale: float = 1.0
    # divide cross-entropy by C as well as N
    ce_class_mean: bool = True
    ds_weights: Optional[tuple] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.dice_aggregation not in ("global", "per-class-mean"):
            raise ValueError(f"unknown dice_aggregation {self.dice_aggregation!r}")
        if self.ds_weights is not None:
            self.ds_weights = tuple(float(w) for w in self.ds_weights)


def one_hot(labels, num_classes, dtype=torch.float64):
    """Indicator encoding ``(B, *spatial) -> (B, C, *spatial)``."""
    labels = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels)
    if labels.is_floating_point():
        raise TypeError("labels must be integers")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        idx = tuple(int(v) for v in torch.nonzero(bad)[0])
        raise ValueError(f"label {int(labels[idx])} at voxel {idx} outside [0, {num_classes - 1}]")
    oh = F.one_hot(labels.long(), num_classes).to(dtype)
    return oh.movedim(-1, 1)


def _check(p, y):
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(y.shape)}")


def _sum_except_class(t):
    dims = [0] + list(range(2, t.ndim))
    return t.sum(dim=dims)


def soft_dice(p, y, eps=1e-5, aggregation="global", numerator_scale=1.0):
    """Soft Dice overlap.

    ``global`` evaluates (s * sum p*y + eps) / (sum p + sum y + eps) over all
    voxels and classes jointly; ``per-class-mean`` evaluates the same ratio
    per class and averages.
    """
    _check(p, y)
    if aggregation == "global":
        return (numerator_scale * (p * y).sum() + eps) / (p.sum() + y.sum() + eps)
    if aggregation == "per-class-mean":
        inter = _sum_except_class(p * y)
        denom = _sum_except_class(p) + _sum_except_class(y)
        return ((numerator_scale * inter + eps) / (denom + eps)).mean()
    raise ValueError(f"unknown aggregation {aggregation!r}")


def cross_entropy(p, y, class_mean=True):
    """-(1/N)(1/C) sum y log p, with p floored at 1e-12. Drop 1/C via ``class_mean=False``."""
    _check(p, y)
    n_classes = p.shape[1]
    n_voxels = p.numel() // n_classes
    ce = -(y * torch.log(p.clamp_min(PROB_FLOOR))).sum() / n_voxels
    return ce / n_classes if class_mean else ce


def dcce(p, y, config: LossConfig = LossConfig()):
    return -soft_dice(p, y, config.epsilon, config.dice_aggregation, config.dice_numerator_scale) + cross_entropy(
        p, y, config.ce_class_mean
    )


def tversky_index(p, y, alpha=0.3, beta=0.7, eps=1e-5, aggregation="global"):
    _check(p, y)
    if aggregation == "global":
        tp = (p * y).sum()
        fp = (p * (1 - y)).sum()
        fn = ((1 - p) * y).sum()
        return (tp + eps) / (tp + alpha * fp + beta * fn + eps)
    if aggregation == "per-class-mean":
        tp = _sum_except_class(p * y)
        fp = _sum_except_class(p * (1 - y))
        fn = _sum_except_class((1 - p) * y)
        return ((tp + eps) / (tp + alpha * fp + beta * fn + eps)).mean()
    raise ValueError(f"unknown aggregation {aggregation!r}")


def tversky_loss(p, y, alpha=0.3, beta=0.7, eps=1e-5, aggregation="global"):
    """1 - Tversky index; alpha weights false positives, beta false negatives."""
    return 1 - tversky_index(p, y, alpha, beta, eps, aggregation)


def hybrid_loss(p, y, config: LossConfig = LossConfig()):
    return dcce(p, y, config) + tversky_loss(
        p, y, config.alpha, config.beta, config.epsilon, config.dice_aggregation
    )


def deep_supervised(level_losses: Sequence, ds_weights: Sequence):
    if len(level_losses) != len(ds_weights):
        raise ValueError(f"got {len(level_losses)} level losses for {len(ds_weights)} weights")
    total = 0
    for w, loss in zip(ds_weights, level_losses):
        total = total + w * loss
    return total


def _is_empty(pair):
    return pair is None or pair[0] is None or pair[0].numel() == 0


def final_loss(supervised, pseudo=None, config: LossConfig = LossConfig()):
    """Hybrid loss on labelled data plus the same loss on pseudo-labelled data, unweighted."""
    total = hybrid_loss(*supervised, config)
    if not _is_empty(pseudo):
        total = total + hybrid_loss(*pseudo, config)
    return total


# ---------------------------------------------------------------------------
# helpers used by the trainer


def downsample_labels(labels, spatial_shape):
    """Nearest-neighbour resize of an integer ``(B, *spatial)`` label tensor."""
    labels = torch.as_tensor(labels)
    if tuple(labels.shape[1:]) == tuple(spatial_shape):
        return labels
    out = F.interpolate(labels[:, None].float(), size=tuple(spatial_shape), mode="nearest")
    return out[:, 0].to(labels.dtype)


def level_hybrid_losses(logits_per_level, labels, config: LossConfig):
    """Hybrid loss of each supervised output against resized targets."""
    labels = torch.as_tensor(labels)
    losses = []
    for logits in logits_per_level:
        p = torch.softmax(logits, dim=1)
        y = one_hot(downsample_labels(labels, logits.shape[2:]), logits.shape[1], dtype=logits.dtype)
        losses.append(hybrid_loss(p, y, config))
    return losses


def deep_supervised_hybrid(logits_per_level, labels, config: LossConfig, ds_weights):
    return deep_supervised(level_hybrid_losses(logits_per_level, labels, config), ds_weights)
