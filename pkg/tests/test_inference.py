import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from abseg import pipeline
from abseg.inference import (
    InferenceConfig,
    ProbabilityMap,
    TTAPlan,
    argmax_labels,
    count_windows,
    ensemble,
    generate_pseudo_labels,
    gaussian_importance,
    model_predictor,
    predict_volume,
    sliding_window,
    tta_predict,
    window_starts,
)
from abseg.losses import one_hot
from abseg.network import NetworkSpec, build, save_checkpoint
from abseg.volume_io import load_labelmap


def simplex(rng, shape, c=3):
    a = rng.gamma(1.0, size=(c,) + shape)
    return a / a.sum(axis=0)


def constant_fn(c=3):
    vals = np.arange(1, c + 1, dtype=np.float64)
    vals /= vals.sum()

    def fn(patch):
        return np.broadcast_to(vals[:, None, None, None], (c,) + patch.shape[1:]).copy()

    return fn


def local_fn(patch):
    # voxelwise softmax of the input channels: exactly flip- and shift-equivariant
    e = np.exp(patch - patch.max(axis=0))
    return e / e.sum(axis=0)


# -- sliding window


def test_window_count_reference_volume():
    per_axis = [math.ceil((e - p) / (p * 0.5)) + 1 for e, p in zip((164, 194, 142), (128, 160, 112))]
    assert per_axis == [2, 2, 2]
    assert count_windows((164, 194, 142), (128, 160, 112), 0.5) == 8


def test_window_starts_cover_extent():
    for extent, patch in [(50, 16), (17, 16), (16, 16), (100, 33)]:
        s = window_starts(extent, patch, 0.5)
        assert s[0] == 0 and s[-1] == extent - patch
        covered = np.zeros(extent, bool)
        for o in s:
            covered[o : o + patch] = True
        assert covered.all()


def test_single_window_equals_predictor(rng):
    vol = rng.normal(size=(3, 8, 8, 8))
    np.testing.assert_array_equal(sliding_window(local_fn, vol, (8, 8, 8)), local_fn(vol))


@pytest.mark.parametrize("weighting", ["uniform", "gaussian"])
def test_constant_predictor_constant_output(rng, weighting):
    out = sliding_window(constant_fn(), rng.normal(size=(3, 20, 13, 9)), (8, 8, 8), 0.5, weighting)
    np.testing.assert_allclose(out, constant_fn()(np.zeros((3, 20, 13, 9))), atol=1e-12)


@pytest.mark.parametrize("weighting", ["uniform", "gaussian"])
def test_local_predictor_tiles_exactly(rng, weighting):
    vol = rng.normal(size=(3, 21, 17, 10))
    out = sliding_window(local_fn, vol, (8, 8, 8), 0.5, weighting)
    np.testing.assert_allclose(out, local_fn(vol), atol=1e-12)


def test_small_volume_padded_and_cropped(rng):
    vol = rng.normal(size=(3, 5, 9, 3))
    out = sliding_window(local_fn, vol, (8, 8, 8))
    assert out.shape == (3, 5, 9, 3)
    np.testing.assert_allclose(out, local_fn(vol), atol=1e-12)


def test_gaussian_importance_positive_peak():
    g = gaussian_importance((8, 10, 6))
    assert g.max() == 1.0 and g.min() > 0


def test_inference_config():
    assert InferenceConfig().patch(type("T", (), {"patch_size": (4, 4, 4)})) == (4, 4, 4)
    with pytest.raises(ValueError):
        InferenceConfig(overlap=1.0)
    with pytest.raises(ValueError):
        InferenceConfig(weighting="cosine")


# -- TTA


def test_tta_transform_sets():
    assert len(TTAPlan(("x", "y", "z")).transforms) == 8
    plan = TTAPlan(("y", "z"))
    assert plan.describe() == ["id", "y", "z", "yz"]
    assert len(TTAPlan(()).transforms) == 1
    with pytest.raises(ValueError):
        TTAPlan(("q",))


def test_tta_equivariant_fixed_point(rng):
    vol = rng.normal(size=(3, 6, 7, 5))
    out = tta_predict(local_fn, vol, TTAPlan(("x", "y", "z")))
    np.testing.assert_allclose(out, local_fn(vol), atol=1e-6)


def test_singleton_plan_bit_identical(rng):
    model = build(NetworkSpec.tiny(5), seed=0)
    vol = rng.normal(size=(3, 16, 16, 16)).astype(np.float32)
    fn = model_predictor(model)
    plain = sliding_window(fn, vol, (16, 16, 16))
    assert np.array_equal(tta_predict(lambda v: sliding_window(fn, v, (16, 16, 16)), vol, TTAPlan(())), plain)


def test_tta_x_flip_symmetrises(rng):
    # a position-dependent predictor becomes x-symmetric under x-flip TTA
    def ramp(patch):
        x = np.linspace(0, 1, patch.shape[1])[:, None, None]
        p1 = np.broadcast_to(x, patch.shape[1:])
        return np.stack([1 - p1, p1])

    out = tta_predict(ramp, np.zeros((3, 6, 4, 4)), TTAPlan(("x",)))
    np.testing.assert_allclose(out, out[:, ::-1], atol=1e-15)
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


# -- ensemble / argmax


def test_ensemble_two_maps():
    a = ProbabilityMap(np.array([0.6, 0.4]).reshape(2, 1, 1, 1))
    b = ProbabilityMap(np.array([0.2, 0.8]).reshape(2, 1, 1, 1))
    assert ensemble([a, b]).probs.ravel() == pytest.approx([0.4, 0.6], abs=1e-15)


def test_ensemble_errors(rng):
    a = ProbabilityMap(simplex(rng, (2, 2, 2)), case_id="a")
    with pytest.raises(ValueError):
        ensemble([])
    with pytest.raises(ValueError):
        ensemble([a, ProbabilityMap(simplex(rng, (2, 2, 3)), case_id="a")])
    with pytest.raises(ValueError):
        ensemble([a, ProbabilityMap(a.probs, case_id="b")])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5))
def test_ensemble_properties(seed, n):
    rng = np.random.default_rng(seed)
    maps = [ProbabilityMap(simplex(rng, (3, 4, 2))) for _ in range(n)]
    out = ensemble(maps)
    out.check_simplex(1e-6)
    np.testing.assert_allclose(ensemble(maps[::-1]).probs, out.probs, atol=1e-15)
    np.testing.assert_array_equal(ensemble([maps[0]] * n).probs, maps[0].probs)


def test_argmax_examples(rng):
    lab = rng.integers(0, 4, size=(5, 4, 3))
    oh = one_hot(torch.as_tensor(lab)[None], 4)[0].numpy()
    np.testing.assert_array_equal(argmax_labels(ProbabilityMap(oh)).labels, lab)
    assert not argmax_labels(ProbabilityMap(np.full((3, 2, 2, 2), 1 / 3))).labels.any()


def test_argmax_brute_force(rng):
    p = simplex(rng, (6, 5, 4), c=4)
    p[:, 0, 0, 0] = [0.4, 0.4, 0.1, 0.1]  # tie -> lower class
    lab = argmax_labels(ProbabilityMap(p)).labels
    for idx in np.ndindex(lab.shape):
        col = [p[(c,) + idx] for c in range(4)]
        best = 0
        for c in range(1, 4):
            if col[c] > col[best]:
                best = c
        assert lab[idx] == best
    assert lab[0, 0, 0] == 0 and lab.dtype == np.int16


# -- full prediction and pseudo labels


def test_predict_volume_simplex(rng):
    model = build(NetworkSpec.tiny(5), seed=0)
    img = rng.normal(size=(3, 20, 16, 16)).astype(np.float32)
    prob = predict_volume([model, model], img, TTAPlan(("y", "z")), (16, 16, 16), 0.5, case_id="c")
    assert prob.probs.shape == (5, 20, 16, 16)
    prob.check_simplex(1e-6)


def test_pseudo_labels_and_provenance(tmp_path):
    manifest = pipeline.synth(tmp_path / "d", n_cases=1, n_test=2, size=(16, 16, 16))
    unl = manifest.subset(split="test")
    model = build(NetworkSpec.tiny(5), seed=7)
    ck_a = save_checkpoint(tmp_path / "a.npz", model)
    ck_b = save_checkpoint(tmp_path / "b.npz", model)
    plan = TTAPlan(("y", "z"))
    one = generate_pseudo_labels([ck_a], unl, plan, (16, 16, 16), 0.5, tmp_path / "one")
    two = generate_pseudo_labels([ck_a, ck_b], unl, plan, (16, 16, 16), 0.5, tmp_path / "two")
    assert one.case_ids == two.case_ids == ["test_000", "test_001"]
    for cid in one.case_ids:
        la, _ = load_labelmap(one.resolve(one.get(cid).label), 5)
        lb, _ = load_labelmap(two.resolve(two.get(cid).label), 5)
        np.testing.assert_array_equal(la.labels, lb.labels)
        prov = json.loads((tmp_path / "two" / f"{cid}_pseudo.provenance.json").read_text())
        assert prov["models"] == [str(ck_a), str(ck_b)]
        assert prov["transforms"] == ["id", "y", "z", "yz"]
    # pseudo manifest is trainable: every entry carries a label
    assert two.train_ids() == two.case_ids
