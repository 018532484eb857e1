"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from abseg import pipeline
from abseg.cli import main
from abseg.config import load_run_config
from abseg.experiments import flip_probe, overfit_smoke, smoke_config
from abseg.inference import ProbabilityMap, TTAPlan, argmax_labels, ensemble, model_predictor, sliding_window, \
    tta_predict
from abseg.losses import LossConfig, cross_entropy, dcce, deep_supervised, hybrid_loss, one_hot, soft_dice, \
    tversky_loss
from abseg.metrics import dice_score, surface_dice
from abseg.network import NetworkSpec, build, count_parameters, load_checkpoint, shape_plan
from abseg.preprocess import load_training_case, sample_batch
from abseg.trainer import PSEUDO_SEED_OFFSET, poly_lr, step_loss
from abseg.volume_io import DatasetManifest

import oracles
from conftest import acceptance

D = torch.float64


def test_criterion_01_shape_contract():
    t0 = time.perf_counter()
    plan = shape_plan(NetworkSpec(), (3, 128, 160, 112))
    bottleneck = next(s.shape for s in plan if s.name == "bottleneck")
    dt = time.perf_counter() - t0
    ok = bottleneck == (320, 8, 10, 7) and dt < 1.0
    acceptance(1, ok, f"bottleneck {bottleneck} in {dt * 1e3:.1f} ms")
    assert ok


def _fd_relative_error(model, loss_fn, h=1e-6):
    """Central differences over every parameter; max-norm error relative to the max-norm numeric gradient.

    The step stays well below the distance of any pre-activation from the
    LeakyReLU kink, so each difference quotient sees a smooth function.
    """
    params = dict(model.named_parameters())
    analytic = torch.autograd.grad(loss_fn(), list(params.values()))
    err, scale = 0.0, 0.0
    with torch.no_grad():
        for p, a in zip(params.values(), analytic):
            flat = p.view(-1)
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num[i] = (up - down) / (2 * h)
            err = max(err, (a.view(-1) - num).abs().max().item())
            scale = max(scale, num.abs().max().item())
    return err / scale


def test_criterion_02_gradient_fidelity():
    t0 = time.perf_counter()
    spec = NetworkSpec(num_classes=3, blocks_per_level=(1, 1), filters_per_level=(2, 3),
                       downsample_strides=((2, 1, 1),), deep_supervision_levels=1)
    model = build(spec, seed=0, dtype=D)
    n_params = count_parameters(model)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 3, 4, 3, 1, generator=g, dtype=D)  # 12 voxels
    y = one_hot(torch.randint(0, 3, (1, 4, 3, 1), generator=g), 3)
    cfg = LossConfig()
    fns = {"dcce": lambda p: dcce(p, y, cfg), "tversky_loss": lambda p: tversky_loss(p, y),
           "hybrid_loss": lambda p: hybrid_loss(p, y, cfg)}
    errs = {}
    for name, fn in fns.items():
        errs[name] = _fd_relative_error(model, lambda: fn(torch.softmax(model(x)[0], dim=1)))
    dt = time.perf_counter() - t0
    ok = n_params <= 5000 and max(errs.values()) < 1e-4 and dt < 120
    acceptance(2, ok, f"{n_params} params, max rel err " + ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
               + f", {dt:.1f} s")
    assert ok


def _pair(rows, labels):
    p = torch.tensor(rows, dtype=D).T[None]
    return p, one_hot(torch.tensor([labels]), p.shape[1])


def test_criterion_03_loss_oracles():
    eps = 1e-14
    got = {
        "tversky 1 voxel": float(tversky_loss(*_pair([[0.8, 0.2]], [0]), 0.3, 0.7, eps)),
        "tversky 2 voxels": float(tversky_loss(*_pair([[0.8, 0.2], [0.4, 0.6]], [0, 1]), 0.3, 0.7, eps)),
        "soft dice": float(soft_dice(*_pair([[0.8, 0.2], [0.4, 0.6]], [0, 1]), eps)),
        "cross entropy": float(cross_entropy(*_pair([[0.5, 0.5]], [0]))),
    }
    want = {"tversky 1 voxel": 0.2, "tversky 2 voxels": 0.3, "soft dice": 0.35,
            "cross entropy": -0.5 * math.log(0.5)}
    errs = {k: abs(got[k] - want[k]) for k in want}
    ok = max(errs.values()) <= 1e-10 and abs(want["cross entropy"] - 0.34657) < 5e-6
    acceptance(3, ok, ", ".join(f"{k} {got[k]:.10f}" for k in got))
    assert ok


def test_criterion_04_schedule():
    mid = poly_lr(500, 1000, 1e-4, 0.9)
    ref = 5.358867312681465821065031625116710114532e-05  # 40-digit mpmath
    rel = abs(mid - ref) / ref
    ok = rel <= 1e-12 and poly_lr(0, 1000, 1e-4, 0.9) == 1e-4 and poly_lr(1000, 1000, 1e-4, 0.9) == 0.0
    acceptance(4, ok, f"poly_lr(500) = {mid!r}, rel err {rel:.1e}, endpoints exact")
    assert ok


def test_criterion_05_deep_supervision_weights():
    spec = NetworkSpec()
    combined = deep_supervised([1.0, 0.0, 0.0, 0.0], spec.ds_weights)
    ok = combined == 8 / 15 and sum(spec.ds_weight_fractions) == Fraction(1) \
        and abs(sum(spec.ds_weights) - 1) <= 1e-15
    acceptance(5, ok, f"[1,0,0,0] -> {combined!r}, weights {[str(w) for w in spec.ds_weight_fractions]}")
    assert ok


def test_criterion_06_ensemble_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    failures = []
    for i in range(100):
        c = int(rng.integers(2, 6))
        shape = tuple(int(s) for s in rng.integers(1, 6, 3))
        maps = []
        for _ in range(int(rng.integers(2, 5))):
            a = rng.gamma(0.5, size=(c,) + shape)
            maps.append(ProbabilityMap(a / a.sum(0), case_id="c"))
        m = maps[0]
        k = int(rng.integers(1, 6))
        same = ensemble([m] * k)
        if not np.array_equal(same.probs, m.probs):
            failures.append((i, "idempotence"))
        if not np.array_equal(argmax_labels(same).labels, argmax_labels(m).labels):
            failures.append((i, "argmax"))
        out = ensemble(maps)
        perm = [maps[j] for j in rng.permutation(len(maps))]
        if not np.array_equal(ensemble(perm).probs, out.probs):
            failures.append((i, "permutation"))
        if np.abs(out.probs.sum(0) - 1).max() > 1e-12 or out.probs.min() < 0:
            failures.append((i, "simplex"))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 10
    acceptance(6, ok, f"100 random maps, {len(failures)} violations, {dt:.2f} s")
    assert ok, failures[:5]


def test_criterion_07_metric_oracles():
    t0 = time.perf_counter()
    a = np.zeros((8, 4, 4), int)
    b = np.zeros((8, 4, 4), int)
    a[0:4] = 1
    b[2:6] = 1
    cube = dice_score(a, b, 1)
    rng = np.random.default_rng(7)
    worst, sizes = 0.0, []
    for i in range(20):
        shape = tuple(int(s) for s in rng.integers(8, 33, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.7, 1.8, size=3)) if i % 2 else (1.2, 1.2, 1.2)
        tau = float(rng.choice([0.0, 0.6, 1.2, 2.0, 3.5]))
        m1 = oracles.blob(rng, shape)
        # half the pairs are near-identical shapes, so scores span the whole range
        m2 = oracles.blob(rng, shape) if i % 2 else np.roll(m1, int(rng.integers(-2, 3)), axis=int(rng.integers(3)))
        if not m1.any() or not m2.any():
            m1[0, 0, 0] = m2[-1, -1, -1] = True
        want = oracles.surface_dice(m1, m2, tau, spacing)
        got = surface_dice(m1, m2, True, tau, spacing)
        worst = max(worst, abs(got - want))
        sizes.append(round(want, 3))
    dt = time.perf_counter() - t0
    ok = cube == 0.5 and worst <= 1e-9 and dt < 300
    acceptance(7, ok, f"cube dice {cube}, max |fast - brute| {worst:.1e} over 20 pairs "
                      f"(scores {min(sizes)}..{max(sizes)}), {dt:.1f} s")
    assert ok


def test_criterion_08_tta_bookkeeping():
    t0 = time.perf_counter()
    n1 = len(TTAPlan(load_run_config(task="task1").flip_axes).transforms)
    n2 = len(TTAPlan(load_run_config(task="task2").flip_axes).transforms)
    model = build(NetworkSpec.tiny(5), seed=0)
    vol = np.random.default_rng(8).normal(size=(3, 24, 16, 16)).astype(np.float32)
    fn = model_predictor(model)
    plain = sliding_window(fn, vol, (16, 16, 16), 0.5)
    single = tta_predict(lambda v: sliding_window(fn, v, (16, 16, 16), 0.5), vol, TTAPlan(()))
    identical = plain.tobytes() == single.tobytes()
    dt = time.perf_counter() - t0
    ok = n1 == 8 and n2 == 4 and identical and dt < 30
    acceptance(8, ok, f"task1 {n1} transforms, task2 {n2}, singleton bit-identical {identical}, {dt:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_09_overfit_smoke(tmp_path):
    res = overfit_smoke(tmp_path, steps=200)
    ok = res["steps"] <= 200 and res["foreground_dice"] >= 0.95 and res["seconds"] < 600
    acceptance(9, ok, f"foreground Dice {res['foreground_dice']:.4f} (per class "
                      f"{[round(d, 3) for d in res['dice_per_class']]}, binary {res['binary_foreground_dice']:.4f}) "
                      f"after {res['steps']} steps, {res['seconds']:.0f} s")
    assert ok


def _independent_step_total(model, batch, pbatch, weights):
    """Deep-supervised hybrid on both batches, recomputed in numpy."""
    total = 0.0
    for b in (batch, pbatch):
        with torch.no_grad():
            outs = model(torch.as_tensor(b.inputs, dtype=D))
        for w, logits in zip(weights, outs):
            z = logits.numpy()
            stride = b.targets.shape[1] // z.shape[2]
            lab = b.targets[:, ::stride, ::stride, ::stride]
            y = (lab[:, None] == np.arange(z.shape[1])[None, :, None, None, None]).astype(np.float64)
            total += w * oracles.hybrid(oracles.softmax(z), y)
    return total


@pytest.mark.slow
def test_criterion_10_end_to_end(tmp_path):
    t0 = time.perf_counter()
    manifest = pipeline.synth(tmp_path / "data", n_cases=4, seed=0, size=(32, 32, 32), n_test=2)
    run = smoke_config(num_classes=5, steps=20, patch=(32, 32, 32), lr0=0.05, batch_size=2,
                       aggregation="per-class-mean")
    from abseg.trainer import run_cross_validation

    cv = run_cross_validation(run, manifest, 2, tmp_path / "cv")
    models = [str(p) for p in cv.checkpoints]
    written = pipeline.predict(run, manifest, models, tmp_path / "pred", split="test")
    res = pipeline.pseudo_train(run, manifest, models, tmp_path / "pseudo")
    curve = res.curve
    pseudo_ran = len(curve) == 20 and all(r["components"]["pseudo"] is not None for r in curve)
    sums_ok = all(abs(r["loss"] - (r["components"]["supervised"] + r["components"]["pseudo"]))
                  <= 1e-6 * abs(r["loss"]) for r in curve)

    # recompute step 0 in double precision from the initial checkpoint
    pm = DatasetManifest.load(tmp_path / "pseudo" / "pseudo" / "manifest.json")
    train_m = manifest.subset(split="train")
    cases = [load_training_case(train_m, train_m.get(c), run.preprocess)[:2] for c in train_m.train_ids()]
    pcases = [load_training_case(pm, e, run.preprocess)[:2] for e in pm.entries]
    cfg = run.training
    batch = sample_batch(cases, cfg.patch_size, cfg.batch_size, cfg.seed, 0, cfg.fg_bias, run.augmentation)
    pbatch = sample_batch(pcases, cfg.patch_size, cfg.batch_size, cfg.seed + PSEUDO_SEED_OFFSET, 0, cfg.fg_bias,
                          run.augmentation)
    model = load_checkpoint(tmp_path / "pseudo" / "checkpoints" / "step_000000.npz").to_model(D)
    model.train()
    loss64, comps = step_loss(model, batch, run.loss, run.network.ds_weights, pbatch)
    # the independent oracle implements the global aggregation, so compare under that setting too
    glob = LossConfig(dice_aggregation="global")
    loss_g, _ = step_loss(model, batch, glob, run.network.ds_weights, pbatch)
    indep = _independent_step_total(model, batch, pbatch, run.network.ds_weights)
    loss64, loss_g = float(loss64.detach()), float(loss_g.detach())
    eq5_err = abs(loss_g - indep)
    split_err = abs(loss64 - float(comps["supervised"].detach()) - float(comps["pseudo"].detach()))
    recorded_err = abs(loss64 - curve[0]["loss"]) / abs(curve[0]["loss"])

    report = pipeline.evaluate(tmp_path / "pred", tmp_path / "data")
    rows = report.to_dict()["rows"]
    complete = (len(rows) == len(written) * 4 and all(0 <= r["dsc"] <= 1 and 0 <= r["sdsc"] <= 1 for r in rows)
                and (tmp_path / "pred" / "report.json").exists() and (tmp_path / "pred" / "report.txt").exists())
    dt = time.perf_counter() - t0
    ok = (len(cv.rows) == 2 and pseudo_ran and sums_ok and eq5_err <= 1e-9 and split_err <= 1e-9
          and recorded_err < 1e-4 and complete and dt < 1800)
    acceptance(10, ok, f"2-fold CV, {len(models)}-model ensemble on {len(written)} cases, 20 pseudo steps, "
                       f"final-loss vs independent sum {eq5_err:.1e}, report {len(rows)} rows "
                       f"(DSC {report.mean('dsc'):.3f}, SDSC {report.mean('sdsc'):.3f}), {dt:.0f} s")
    assert ok, (pseudo_ran, sums_ok, eq5_err, split_err, recorded_err, complete)


@pytest.mark.slow
def test_criterion_11_flip_probe(tmp_path):
    t0 = time.perf_counter()
    res = flip_probe(tmp_path, n_train=4, n_test=2, size=32, steps=150)
    xyz, yz = res["xyz"]["mean_dice"], res["yz"]["mean_dice"]
    dt = time.perf_counter() - t0
    ok = xyz < yz and res["xyz"]["transforms"] == 8 and res["yz"]["transforms"] == 4 and dt < 1200
    acceptance(11, ok, f"paired-class Dice with x-flip TTA {xyz:.4f} < y,z-only {yz:.4f}, {dt:.0f} s")
    assert ok


def _cli_pipeline(root, config):
    data, run_dir, pred = root / "data", root / "run", root / "pred"
    assert main(["synth", "--out", str(data), "--n", "2", "--n-test", "1", "--size", "16", "16", "16"]) == 0
    assert main(["train", "--config", str(config), "--manifest", str(data / "manifest.json"),
                 "--run-dir", str(run_dir)]) == 0
    assert main(["predict", "--config", str(config), "--manifest", str(data / "manifest.json"),
                 "--models", str(run_dir / "checkpoints" / "latest.npz"), "--out", str(pred)]) == 0
    assert main(["evaluate", "--pred-dir", str(pred), "--gt-dir", str(data)]) == 0
    return run_dir, pred


@pytest.mark.slow
def test_criterion_12_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("ABSEG_NUM_WORKERS", "1")
    first = tmp_path / "first"
    first.mkdir()
    smoke_config(num_classes=5, steps=6, patch=(16, 16, 16)).save(first / "config.json")
    run1, pred1 = _cli_pipeline(first, first / "config.json")
    run2, pred2 = _cli_pipeline(tmp_path / "second", run1 / "config.expanded.json")
    files = {
        "loss curve": (run1 / "loss_curve.jsonl", run2 / "loss_curve.jsonl"),
        "report.json": (pred1 / "report.json", pred2 / "report.json"),
        "report.txt": (pred1 / "report.txt", pred2 / "report.txt"),
    }
    same = {k: a.read_bytes() == b.read_bytes() for k, (a, b) in files.items()}
    n_steps = len((run1 / "loss_curve.jsonl").read_text().splitlines())
    ok = all(same.values()) and n_steps == 6
    acceptance(12, ok, "byte-identical " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
