"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line with its timing.

Run with ``pytest tests/test_acceptance.py``; the lines are repeated in the
terminal summary.
"""
import filecmp
import json
import time

import numpy as np
import pytest

from meshrecover.camera import CameraPose, Intrinsics, lift, project, render_depth_uv, visible_vertices
from meshrecover.cli import main
from meshrecover.data import HELDOUT_POSE_SEED, TRAIN_POSE_SEED, bundled_samples, toy_samples
from meshrecover.evaluation import baseline_report, evaluate, noise_sweep
from meshrecover.mae import MAEModel, ModelConfig
from meshrecover.matching import PartialMesh
from meshrecover.selfcheck import gradient_check, gradient_fixture, nearest_check, visibility_check
from meshrecover.toy import pose_set
from meshrecover.training import TrainConfig, train

RESULTS = []

# Frozen bounds. OVERFIT_BOUND_MM is the required ceiling; OVERFIT_MEASURED_MM
# is what the seeded authoring run reached and is checked as a regression.
# The architecture does not reach the ceiling in 2000 steps, so criterion 7
# is expected to report FAIL (see the README).
OVERFIT_BOUND_MM = 5.0
OVERFIT_MEASURED_MM = 9.46
OVERFIT_CONFIG = TrainConfig(steps=2000, lr=5e-3)
HELDOUT_CONFIG = TrainConfig(steps=2000, lr=5e-3, batch_size=8)
TRAIN_POSES, HELDOUT_POSES = 200, 50


def record(n: int, what: str, ok: bool, detail: str, elapsed: float, limit: float | None):
    in_time = limit is None or elapsed < limit
    passed = ok and in_time
    budget = "" if limit is None else f" / {limit:.0f} s"
    line = f"{'PASS' if passed else 'FAIL'}  [{n:2d}] {what}: {detail} ({elapsed:.1f} s{budget})"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.fixture(scope="module")
def overfit(template):
    data = bundled_samples()
    model = MAEModel(template, ModelConfig(seed=0))
    with Clock() as c:
        train(model, data, OVERFIT_CONFIG)
    return model, data, c.elapsed


def test_01_grid_nearest_matches_bruteforce():
    with Clock() as c:
        bad = nearest_check(np.random.default_rng(1), 200)
    record(1, "grid NN vs brute force", bad == 0, f"{200 - bad}/200 instances identical", c.elapsed, 30)


def test_02_visibility_matches_ray_oracle():
    with Clock() as c:
        bad = visibility_check(np.random.default_rng(2), 50)
    record(2, "visibility vs ray oracle", bad == 0, f"{bad} vertices differ over 50 meshes", c.elapsed, 60)


def test_03_lift_project_round_trip(template):
    # Posed toy bodies seen by the configured frontal camera. A vertex counts as
    # rendered visible when ray casting finds it visible and its pixel shows the
    # body; lift uses the rendered depth at the rounded projected pixel.
    intr = Intrinsics()
    pose = CameraPose.frontal()
    with Clock() as c:
        good = total = 0
        for v in pose_set(template, 40, 7):
            frame = render_depth_uv(v, template.triangles, template.uv, pose, intr)
            cam = pose.to_camera(v)
            pix, z = project(cam, intr)
            pix = np.rint(pix).astype(int)
            shown = visible_vertices(v, template.triangles, pose, intr)
            shown[shown] = frame.depth[pix[shown, 1], pix[shown, 0]] > 0
            for i in np.nonzero(shown)[0]:
                total += 1
                good += int(np.linalg.norm(lift(frame, pix[i]) - cam[i]) <= 2 * z[i] / intr.fx)
    frac = good / total
    record(3, "lift(project(v)) round trip", frac >= 0.99, f"{good}/{total} = {frac:.2%} within 2*depth/fx",
           c.elapsed, 10)


def test_04_gradients_match_central_differences():
    with Clock() as c:
        model, verts, mask, targets, joints, full = gradient_fixture(0)
        errs = gradient_check(model, verts, mask, targets, joints, full)
    worst = max(errs, key=errs.get)
    record(4, "gradients vs central differences (f64)", errs[worst] < 1e-6,
           f"{len(errs) - 1} tensors, max rel. error {errs[worst]:.2e} ({worst})", c.elapsed, 120)


def _random_model(template, dtype="float32", seed=0):
    model = MAEModel(template, ModelConfig(seed=seed, dtype=dtype))
    rng = np.random.default_rng(seed)
    for t in model.params.values():   # move away from the near-constant initial map
        t.data = (t.data + 0.3 * rng.standard_normal(t.data.shape)).astype(t.data.dtype)
    return model


def test_05_masked_inputs_are_ignored(template):
    data = bundled_samples()
    model = _random_model(template)
    rng = np.random.default_rng(5)
    with Clock() as c:
        same = 0
        for trial in range(100):
            i = trial % len(data)
            verts, mask = data.inputs[i].copy(), data.masks[i]
            base = model.forward(PartialMesh(verts, mask))
            junk = verts.copy()
            junk[~mask] = rng.standard_normal(((~mask).sum(), 3)) * 10.0 ** rng.uniform(-3, 3)
            same += int(np.array_equal(model.forward(PartialMesh(junk, mask)), base))
    record(5, "mask-token independence", same == 100, f"{same}/100 bitwise identical", c.elapsed, 5)


def test_06_similarity_equivariance(template):
    data = bundled_samples()
    model = _random_model(template)
    rng = np.random.default_rng(6)
    with Clock() as c:
        worst = 0.0
        for trial in range(50):
            i = trial % len(data)
            mask = data.masks[i]
            s = float(np.exp(rng.uniform(-1.5, 1.5)))
            t = rng.uniform(-3, 3, 3)
            base = model.forward(PartialMesh(data.inputs[i], mask))
            moved = model.forward(PartialMesh(np.where(mask[:, None], s * data.inputs[i] + t, 0.0), mask))
            expected = s * base + t
            worst = max(worst, np.abs(moved - expected).max() / np.abs(expected).max())
    record(6, "similarity equivariance", worst < 1e-4, f"max rel. deviation {worst:.1e} over 50 trials",
           c.elapsed, 5)


def test_07_overfit_regression(overfit):
    model, data, elapsed = overfit
    pve = evaluate(model, data, resolution="coarse").pve_mm
    ok = pve < OVERFIT_BOUND_MM
    if OVERFIT_MEASURED_MM is not None:
        ok = ok and pve <= OVERFIT_MEASURED_MM + 0.05
    record(7, "overfit 32 samples / 2000 steps", ok,
           f"coarse PVE {pve:.2f} mm (bound {OVERFIT_BOUND_MM} mm, authoring run {OVERFIT_MEASURED_MM} mm)",
           elapsed, 600)


def test_08_noise_sweep_trend(overfit):
    model, data, _ = overfit
    with Clock() as c:
        rows = noise_sweep(model, data, (0, 10, 30, 50), seed=0, resolution="coarse")
    pves = [p for _, p in rows]
    ok = all(b >= a - 0.2 for a, b in zip(pves, pves[1:]))
    record(8, "noise sweep non-decreasing", ok, " -> ".join(f"{p:.1f}" for p in pves) + " mm", c.elapsed, 120)


def test_09_model_beats_baseline(template):
    with Clock() as c:
        train_set = toy_samples(TRAIN_POSES, TRAIN_POSE_SEED, template=template)
        heldout = toy_samples(HELDOUT_POSES, HELDOUT_POSE_SEED, sample_seed=1, template=template)
        model = MAEModel(template, ModelConfig(seed=0))
        train(model, train_set, HELDOUT_CONFIG)
        ours = evaluate(model, heldout, resolution="coarse").pve_mm
        base = baseline_report(heldout, template).pve_mm
    record(9, "trained model vs baseline fit", ours < base,
           f"held-out coarse PVE {ours:.1f} mm vs baseline {base:.1f} mm", c.elapsed, 300)


def _pipeline(root):
    root.mkdir()
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"training": {"steps": 30, "batch_size": 8}, "eval": {"baseline_iterations": 50}}))
    steps = [["toy-poses", "--count", "12", "--seed", "4", "--out", str(root / "meshes")],
             ["gen-data", "--meshes", str(root / "meshes"), "--config", str(cfg), "--out", str(root / "data")],
             ["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "ckpt")],
             ["eval", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"), "--config", str(cfg),
              "--report", str(root / "report.json"), "--baseline"]]
    for argv in steps:
        assert main(argv) == 0, argv


def _tree_diff(a, b):
    cmp = filecmp.dircmp(a, b)
    diff = [str(a / n) for n in cmp.left_only + cmp.right_only]
    diff += [str(a / n) for n in cmp.common_files if not filecmp.cmp(a / n, b / n, shallow=False)]
    for sub in cmp.common_dirs:
        diff += _tree_diff(a / sub, b / sub)
    return diff


def test_10_pipeline_is_deterministic(tmp_path):
    with Clock() as c:
        _pipeline(tmp_path / "a")
        _pipeline(tmp_path / "b")
    diff = _tree_diff(tmp_path / "a", tmp_path / "b")
    record(10, "gen-data + train + eval rerun", not diff,
           "all archives, checkpoints and reports bit-identical" if not diff else f"differs: {diff}", c.elapsed, None)
