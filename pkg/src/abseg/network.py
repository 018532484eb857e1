"""Residual U-shape network with deep supervision.

Layout (defaults): five encoder levels holding 1, 2, 3, 4, 4 residual blocks
with 32, 64, 128, 256, 320 filters, joined by strided 3x3x3 convolutions; a
shallow decoder with one upsample block (1x1x1 conv + transposed conv) and
one 3x3x3 conv block per level; 1x1x1 output heads on the four finest
decoder levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "abseg-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input spatial dims incompatible with the downsampling plan."""

    def __init__(self, axis, size, multiple):
        self.axis = axis
        self.size = size
        self.multiple = multiple
        super().__init__(
            f"spatial axis {'xyz'[axis]} has size {size}, which is not a multiple of the "
            f"cumulative stride {multiple}"
        )


@dataclass
class NetworkSpec:
    in_channels: int = 3
    num_classes: int = 4
    blocks_per_level: tuple = (1, 2, 3, 4, 4)
    filters_per_level: tuple = (32, 64, 128, 256, 320)
    downsample_strides: tuple = ((2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))
    kernel_size: int = 3
    negative_slope: float = 0.01
    norm_eps: float = 1e-5
    deep_supervision_levels: int = 4

    def __post_init__(self):
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        self.filters_per_level = tuple(int(f) for f in self.filters_per_level)
        self.downsample_strides = tuple(tuple(int(s) for s in st) for st in self.downsample_strides)
        self.validate()

    @property
    def levels(self):
        return len(self.filters_per_level)

    def validate(self):
        if len(self.blocks_per_level) != self.levels:
            raise ValueError("blocks_per_level and filters_per_level must have the same length")
        if len(self.downsample_strides) != self.levels - 1:
            raise ValueError(f"need {self.levels - 1} downsample strides, got {len(self.downsample_strides)}")
        if any(len(s) != 3 or min(s) < 1 for s in self.downsample_strides):
            raise ValueError("each stride must be a positive triple")
        if any(b < 0 for b in self.blocks_per_level):
            raise ValueError("blocks_per_level must be nonnegative")
        if any(f2 < f1 for f1, f2 in zip(self.filters_per_level, self.filters_per_level[1:])):
            raise ValueError("filters_per_level must be nondecreasing")
        if not 1 <= self.deep_supervision_levels <= max(1, self.levels - 1):
            raise ValueError(
                f"deep_supervision_levels must lie in [1, {max(1, self.levels - 1)}], "
                f"got {self.deep_supervision_levels}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    @property
    def ds_weight_fractions(self):
        """Halving weights, finest level first; 8/15, 4/15, 2/15, 1/15 for four levels."""
        d = self.deep_supervision_levels
        total = 2**d - 1
        return [Fraction(2 ** (d - 1 - i), total) for i in range(d)]

    @property
    def ds_weights(self):
        return [float(w) for w in self.ds_weight_fractions]

    def cumulative_strides(self):
        out = [(1, 1, 1)]
        for st in self.downsample_strides:
            out.append(tuple(a * b for a, b in zip(out[-1], st)))
        return out

    def to_dict(self):
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["filters_per_level"] = list(self.filters_per_level)
        d["downsample_strides"] = [list(s) for s in self.downsample_strides]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def tiny(cls, num_classes=4, in_channels=3):
        return cls(
            in_channels=in_channels,
            num_classes=num_classes,
            filters_per_level=(4, 8, 16, 32, 40),
        )


@dataclass
class Stage:
    name: str
    shape: tuple


def shape_plan(spec: NetworkSpec, input_shape):
    """Symbolic (C, X, Y, Z) output shape of every stage; no tensors are allocated."""
    channels, *spatial = (int(s) for s in input_shape)
    if len(spatial) != 3:
        raise ValueError(f"input_shape must be (channels, X, Y, Z), got {input_shape}")
    if channels != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channels, got {channels}")
    total = spec.cumulative_strides()[-1]
    for axis, (size, mult) in enumerate(zip(spatial, total)):
        if size % mult:
            raise ShapeError(axis, size, mult)

    stages = []
    f = spec.filters_per_level
    dims = [tuple(spatial)]
    stages.append(Stage("stem", (f[0], *spatial)))
    stages.append(Stage("encoder.0", (f[0], *spatial)))
    for lvl in range(1, spec.levels):
        st = spec.downsample_strides[lvl - 1]
        dims.append(tuple(d // s for d, s in zip(dims[-1], st)))
        stages.append(Stage(f"down.{lvl}", (f[lvl], *dims[lvl])))
        stages.append(Stage(f"encoder.{lvl}", (f[lvl], *dims[lvl])))
    stages.append(Stage("bottleneck", (f[-1], *dims[-1])))
    for lvl in range(spec.levels - 2, -1, -1):
        stages.append(Stage(f"up.{lvl}.reduce", (f[lvl], *dims[lvl + 1])))
        stages.append(Stage(f"up.{lvl}.transpose", (f[lvl], *dims[lvl])))
        stages.append(Stage(f"up.{lvl}.concat", (2 * f[lvl], *dims[lvl])))
        stages.append(Stage(f"decoder.{lvl}", (f[lvl], *dims[lvl])))
    for lvl in range(spec.deep_supervision_levels):
        stages.append(Stage(f"head.{lvl}", (spec.num_classes, *dims[lvl])))
    return stages


def plan_table(stages):
    width = max(len(s.name) for s in stages)
    lines = [f"{'stage'.ljust(width)}  shape"]
    lines += [f"{s.name.ljust(width)}  {'x'.join(str(v) for v in s.shape)}" for s in stages]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# layers


class InstanceNorm(nn.Module):
    """Per-sample, per-channel standardisation with a learnable scale and offset."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        dims = tuple(range(2, x.ndim))
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, unbiased=False, keepdim=True)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight.view(shape) + self.bias.view(shape)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, spec: NetworkSpec, stride=(1, 1, 1)):
        k = spec.kernel_size
        super().__init__(
            nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2),
            InstanceNorm(cout, spec.norm_eps),
            nn.LeakyReLU(spec.negative_slope),
        )


class ResidualBlock(nn.Module):
    """Two conv-norm-activation layers plus an identity skip."""

    def __init__(self, channels, spec: NetworkSpec):
        super().__init__()
        self.branch = nn.Sequential(ConvNormAct(channels, channels, spec), ConvNormAct(channels, channels, spec))

    def forward(self, x):
        return x + self.branch(x)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.reduce = nn.Conv3d(cin, cout, 1)
        self.transpose = nn.ConvTranspose3d(cout, cout, kernel_size=stride, stride=stride)

    def forward(self, x):
        return self.transpose(self.reduce(x))


class ResUNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        f = spec.filters_per_level
        self.stem = ConvNormAct(spec.in_channels, f[0], spec)
        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        for lvl in range(spec.levels):
            if lvl > 0:
                self.down.append(ConvNormAct(f[lvl - 1], f[lvl], spec, stride=spec.downsample_strides[lvl - 1]))
            self.encoder.append(nn.Sequential(*[ResidualBlock(f[lvl], spec) for _ in range(spec.blocks_per_level[lvl])]))
        # indexed by target level: up[l] maps level l+1 features to level l
        self.up = nn.ModuleList(
            UpBlock(f[lvl + 1], f[lvl], spec.downsample_strides[lvl]) for lvl in range(spec.levels - 1)
        )
        self.decoder = nn.ModuleList(ConvNormAct(2 * f[lvl], f[lvl], spec) for lvl in range(spec.levels - 1))
        self.heads = nn.ModuleList(nn.Conv3d(f[lvl], spec.num_classes, 1) for lvl in range(spec.deep_supervision_levels))

    def forward(self, x):
        """Return logits per supervised level, full resolution first."""
        skips = []
        h = self.stem(x)
        for lvl in range(self.spec.levels):
            if lvl > 0:
                h = self.down[lvl - 1](h)
            h = self.encoder[lvl](h)
            skips.append(h)
        decoded = [None] * (self.spec.levels - 1)
        for lvl in range(self.spec.levels - 2, -1, -1):
            h = self.up[lvl](h)
            h = self.decoder[lvl](torch.cat([skips[lvl], h], dim=1))
            decoded[lvl] = h
        return [self.heads[lvl](decoded[lvl]) for lvl in range(self.spec.deep_supervision_levels)]


# ---------------------------------------------------------------------------
# construction and evaluation


def _he_normal_(tensor, fan_in, slope, generator):
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    with torch.no_grad():
        tensor.normal_(0.0, gain / math.sqrt(fan_in), generator=generator)


def build(spec: NetworkSpec, seed: int = 0, dtype=torch.float32, zero_heads=False) -> ResUNet:
    """Instantiate the network with He (fan-in) initialisation.

    Norm scales start at 1, all offsets and biases at 0. Identical ``seed``
    gives identical parameters.
    """
    model = ResUNet(spec).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            w = module.weight
            if isinstance(module, nn.ConvTranspose3d):
                fan_in = w.shape[0] * int(np.prod(w.shape[2:]))
            else:
                fan_in = w.shape[1] * int(np.prod(w.shape[2:]))
            _he_normal_(w, fan_in, spec.negative_slope, gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, InstanceNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    if zero_heads:
        for head in model.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
    return model


def forward(model: ResUNet, x, mode="train"):
    """Run the network; instance statistics are per sample in both modes."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    if x.ndim != 5:
        raise ValueError(f"input must be (B, C, X, Y, Z), got shape {tuple(x.shape)}")
    shape_plan(model.spec, tuple(x.shape[1:]))
    model.train(mode == "train")
    outputs = model(x)
    if not all(torch.isfinite(o).all() for o in outputs):
        raise FloatingPointError("non-finite logits in forward pass")
    return outputs


def softmax_head(logits):
    """Channel softmax over dim 1 (max-subtracted internally by torch)."""
    return torch.softmax(torch.as_tensor(logits), dim=1)


def gradients(model: nn.Module, loss) -> dict:
    """Gradient of ``loss`` with respect to every named parameter.

    Parameters the loss does not depend on receive exact zeros. Parameters
    frozen with ``requires_grad=False`` are an error.
    """
    named = list(model.named_parameters())
    frozen = [n for n, p in named if not p.requires_grad]
    if frozen:
        raise ValueError(f"parameters detached from the graph: {frozen}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)
    }


def parameter_set(model: nn.Module) -> dict:
    return {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}


def load_parameter_set(model: nn.Module, params: dict):
    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(params))
    extra = sorted(set(params) - set(named))
    if missing or extra:
        raise KeyError(f"parameter mismatch; missing={missing} unexpected={extra}")
    with torch.no_grad():
        for n, p in named.items():
            src = torch.as_tensor(params[n])
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"{n}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    step: int = 0
    velocity: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_model(self, dtype=torch.float32):
        model = build(self.spec, 0, dtype=dtype)
        load_parameter_set(model, self.params)
        return model


def save_checkpoint(path, model_or_spec, params=None, step=0, velocity=None, meta=None):
    """Write one ``.npz`` archive: parameters, optimiser velocity and a JSON header."""
    if isinstance(model_or_spec, ResUNet):
        spec = model_or_spec.spec
        params = parameter_set(model_or_spec)
    else:
        spec = model_or_spec
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "step": int(step),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    for k, v in (velocity or {}).items():
        arrays[f"velocity/{k}"] = np.asarray(v)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an abseg checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        velocity = {k[len("velocity/"):]: data[k].copy() for k in data.files if k.startswith("velocity/")}
    return Checkpoint(NetworkSpec.from_dict(header["spec"]), params, header["step"], velocity, header["meta"])
