import math
import time

import numpy as np
import pytest
import torch

from abseg.losses import cross_entropy, one_hot, tversky_loss
from abseg.network import (
    NetworkSpec,
    ResidualBlock,
    ShapeError,
    build,
    count_parameters,
    forward,
    gradients,
    load_checkpoint,
    parameter_set,
    save_checkpoint,
    shape_plan,
    softmax_head,
)

D = torch.float64


def stage(plan, name):
    return next(s.shape for s in plan if s.name == name)


def closed_form_count(spec: NetworkSpec):
    """Stage-by-stage parameter arithmetic, independent of the module tree."""
    k3 = spec.kernel_size**3

    def cna(cin, cout):
        return cin * cout * k3 + cout + 2 * cout

    f = spec.filters_per_level
    total = cna(spec.in_channels, f[0])
    for lvl, blocks in enumerate(spec.blocks_per_level):
        if lvl:
            total += cna(f[lvl - 1], f[lvl])
        total += blocks * 2 * cna(f[lvl], f[lvl])
    for lvl in range(spec.levels - 1):
        vol = math.prod(spec.downsample_strides[lvl])
        total += f[lvl + 1] * f[lvl] + f[lvl]
        total += f[lvl] * f[lvl] * vol + f[lvl]
        total += cna(2 * f[lvl], f[lvl])
    total += sum(f[lvl] * spec.num_classes + spec.num_classes for lvl in range(spec.deep_supervision_levels))
    return total


# -- shape plan


def test_default_bottleneck():
    t = time.perf_counter()
    plan = shape_plan(NetworkSpec(), (3, 128, 160, 112))
    assert stage(plan, "bottleneck") == (320, 8, 10, 7)
    assert stage(plan, "head.0") == (4, 128, 160, 112)
    assert stage(plan, "decoder.0") == (32, 128, 160, 112)
    assert time.perf_counter() - t < 1.0


def test_tiny_bottleneck():
    assert stage(shape_plan(NetworkSpec.tiny(), (3, 32, 32, 32)), "bottleneck") == (40, 2, 2, 2)


def test_indivisible_shape():
    with pytest.raises(ShapeError) as err:
        shape_plan(NetworkSpec(), (3, 128, 160, 100))
    assert err.value.axis == 2 and err.value.multiple == 16


def test_wrong_channels():
    with pytest.raises(ValueError):
        shape_plan(NetworkSpec(), (2, 32, 32, 32))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(blocks_per_level=(1, 2))
    with pytest.raises(ValueError):
        NetworkSpec(filters_per_level=(32, 16, 64, 128, 256))
    with pytest.raises(ValueError):
        NetworkSpec(deep_supervision_levels=5)


def test_ds_weights():
    spec = NetworkSpec()
    fr = spec.ds_weight_fractions
    assert [str(w) for w in fr] == ["8/15", "4/15", "2/15", "1/15"]
    assert sum(fr) == 1


def test_spec_round_trip():
    spec = NetworkSpec.tiny(num_classes=5)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


# -- build


def test_first_conv_kernel():
    model = build(NetworkSpec())
    assert tuple(model.stem[0].weight.shape) == (32, 3, 3, 3, 3)


def test_build_deterministic():
    a = parameter_set(build(NetworkSpec.tiny(), seed=3))
    b = parameter_set(build(NetworkSpec.tiny(), seed=3))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = parameter_set(build(NetworkSpec.tiny(), seed=4))
    assert not np.array_equal(a["stem.0.weight"], c["stem.0.weight"])


@pytest.mark.parametrize("spec", [NetworkSpec(), NetworkSpec.tiny(), NetworkSpec.tiny(num_classes=5)])
def test_parameter_count(spec):
    assert count_parameters(build(spec)) == closed_form_count(spec)


# -- forward


def test_forward_shapes_match_plan():
    spec = NetworkSpec.tiny()
    model = build(spec, seed=0)
    x = torch.randn(1, 3, 32, 32, 32, generator=torch.Generator().manual_seed(0))
    outs = forward(model, x)
    plan = shape_plan(spec, (3, 32, 32, 32))
    assert [tuple(o.shape[1:]) for o in outs] == [stage(plan, f"head.{i}") for i in range(4)]


def test_zero_heads_uniform():
    model = build(NetworkSpec.tiny(), zero_heads=True)
    outs = forward(model, torch.zeros(1, 3, 16, 16, 16), "eval")
    for o in outs:
        assert (o == 0).all()
        assert torch.allclose(softmax_head(o), torch.full_like(o, 0.25))


def test_identical_batch_samples():
    model = build(NetworkSpec.tiny(), seed=1)
    x = torch.randn(1, 3, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    out = forward(model, torch.cat([x, x]), "eval")[0]
    assert torch.equal(out[0], out[1])


def test_forward_rejects_bad_input():
    model = build(NetworkSpec.tiny())
    with pytest.raises(ValueError):
        forward(model, torch.zeros(3, 16, 16, 16))
    with pytest.raises(ShapeError):
        forward(model, torch.zeros(1, 3, 16, 16, 12))
    with pytest.raises(ValueError):
        forward(model, torch.zeros(1, 3, 16, 16, 16), "predict")


# -- softmax


def test_softmax_examples():
    assert torch.allclose(softmax_head(torch.full((1, 4, 2), 3.0)), torch.full((1, 4, 2), 0.25))
    out = softmax_head(torch.tensor([[0.0, math.log(3)]], dtype=D))
    assert out.tolist()[0] == pytest.approx([0.25, 0.75], abs=1e-15)
    z = torch.randn(2, 3, 5, dtype=D)
    assert torch.allclose(softmax_head(z + 1000), softmax_head(z), atol=1e-15)


# -- gradients


def test_unused_parameter_has_zero_gradient():
    model = build(NetworkSpec.tiny(), dtype=D)
    x = torch.randn(1, 3, 16, 16, 16, dtype=D)
    loss = forward(model, x)[0].mean()  # coarser heads do not enter the loss
    g = gradients(model, loss)
    assert (g["heads.3.weight"] == 0).all() and (g["heads.3.bias"] == 0).all()
    assert g["heads.0.weight"].abs().sum() > 0


def test_frozen_parameter_is_error():
    model = build(NetworkSpec.tiny())
    model.stem[0].weight.requires_grad_(False)
    loss = forward(model, torch.zeros(1, 3, 16, 16, 16))[0].sum()
    with pytest.raises(ValueError, match="stem.0.weight"):
        gradients(model, loss)


def test_pointwise_conv_hand_derivative():
    # loss = mean(w * x + b) has dL/dw = mean(x), dL/db = 1
    conv = torch.nn.Conv3d(1, 1, 1).to(D)
    x = torch.randn(1, 1, 3, 4, 5, dtype=D)
    g = gradients(conv, conv(x).mean())
    assert g["weight"].item() == pytest.approx(x.mean().item(), abs=1e-15)
    assert g["bias"].item() == pytest.approx(1.0, abs=1e-15)


def test_residual_block_zero_branch_is_identity():
    spec = NetworkSpec.tiny()
    block = ResidualBlock(4, spec).to(D)
    with torch.no_grad():
        block.branch[1][1].weight.zero_()  # last norm scale 0, offset 0 -> branch output 0
    x = torch.randn(1, 4, 5, 5, 5, dtype=D)
    assert torch.equal(block(x), x)


def micro_spec():
    return NetworkSpec(
        in_channels=3,
        num_classes=3,
        blocks_per_level=(1, 1),
        filters_per_level=(2, 3),
        downsample_strides=((2, 1, 1),),
        deep_supervision_levels=1,
    )


def test_tiny_network_gradient_vs_finite_differences():
    spec = micro_spec()
    model = build(spec, seed=0, dtype=D)
    assert count_parameters(model) <= 5000
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 4, 3, 1, generator=g, dtype=D)
    y = one_hot(torch.randint(0, 3, (1, 4, 3, 1), generator=g), 3)

    def loss_fn():
        p = torch.softmax(model(x)[0], dim=1)
        return tversky_loss(p, y) + cross_entropy(p, y)

    analytic = gradients(model, loss_fn())
    h = 1e-6
    err, scale = 0.0, 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            err = max(err, (analytic[name].view(-1) - numeric).abs().max().item())
            scale = max(scale, numeric.abs().max().item())
    assert err / scale < 1e-4, err / scale


def test_bias_before_norm_has_zero_gradient():
    # a per-channel constant is removed by instance normalisation
    model = build(micro_spec(), seed=0, dtype=D)
    x = torch.randn(1, 3, 4, 3, 1, dtype=D)
    g = gradients(model, forward(model, x)[0].square().sum())
    assert g["stem.0.bias"].abs().max() < 1e-12


# -- checkpoints


def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec.tiny(num_classes=5)
    model = build(spec, seed=2)
    vel = {k: np.full_like(v, 0.5) for k, v in parameter_set(model).items()}
    path = save_checkpoint(tmp_path / "c.npz", model, step=17, velocity=vel, meta={"fold": 1})
    ck = load_checkpoint(path)
    assert ck.spec == spec and ck.step == 17 and ck.meta == {"fold": 1}
    assert all(np.array_equal(ck.params[k], v) for k, v in parameter_set(model).items())
    assert all(np.array_equal(ck.velocity[k], v) for k, v in vel.items())
    x = torch.randn(1, 3, 16, 16, 16)
    assert torch.equal(forward(ck.to_model(), x, "eval")[0], forward(model, x, "eval")[0])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")
    np.savez(tmp_path / "bad.npz", header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")
