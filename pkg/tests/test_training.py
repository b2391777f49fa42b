import math

import numpy as np
import pytest

from meshrecover import training
from meshrecover.camera import CameraPose, Intrinsics, visible_vertices
from meshrecover.mae import MAEModel, ModelConfig
from meshrecover.selfcheck import gradient_check, gradient_fixture, reference_loss
from meshrecover.toy import pose_set
from meshrecover.training import (AdamW, AugmentConfig, LossWeights, SampleRejected, SampleSet, TrainConfig,
                                  backward, generate_samples, loss_joints, loss_total, loss_vertex, lr_at,
                                  make_sample, sample_rng, train)

INTR = Intrinsics()


# -- losses ---------------------------------------------------------------------

def test_vertex_loss_examples(rng):
    assert float(loss_vertex(np.zeros((4, 3)), np.zeros((4, 3))).data) == 0.0
    assert float(loss_vertex(np.array([[1.0, 2, 3]]), np.zeros((1, 3))).data) == 6.0
    a, b = rng.standard_normal((100, 3)), rng.standard_normal((100, 3))
    oracle = sum(abs(a[i, k] - b[i, k]) for i in range(100) for k in range(3)) / 100
    assert float(loss_vertex(a, b).data) == pytest.approx(oracle, abs=1e-7)
    with pytest.raises(ValueError):
        loss_vertex(a, b[:50])


def _joint_case(octa):
    pred = octa.vertices_full.copy()
    target = octa.joint_regressor @ pred
    target[0] += (0.0, 3.0, 4.0)
    return pred, target


def test_joint_loss_examples(octa, rng):
    pred, target = _joint_case(octa)
    assert float(loss_joints(pred, octa.joint_regressor @ pred, octa).data) == 0.0
    assert float(loss_joints(pred, target, octa).data) == pytest.approx(25.0)
    assert float(loss_joints(pred, target, octa, "mean").data) == pytest.approx(25.0 / octa.n_joints)
    p, t = rng.standard_normal((6, 3)), rng.standard_normal((octa.n_joints, 3))
    reg = octa.joint_regressor
    oracle = 0.0
    for j in range(octa.n_joints):
        for k in range(3):
            oracle += (sum(reg[j, i] * p[i, k] for i in range(6)) - t[j, k]) ** 2
    assert float(loss_joints(p, t, octa).data) == pytest.approx(oracle, rel=1e-6)


def test_total_loss_weights(octa):
    pred, target_j = _joint_case(octa)
    pred_off = pred.copy()
    pred_off[0] += (6.0, 0.0, 0.0)
    target_j = target_j + octa.joint_regressor[:, :1] * np.array([6.0, 0.0, 0.0])   # cancel the vertex shift
    # L_V = 6 / 6 = 1, L_3D = 25
    total, lv, lj = loss_total(pred_off, pred, target_j, octa, LossWeights(0.5, 2.0, "sum"))
    assert float(lv.data) == pytest.approx(1.0) and float(lj.data) == pytest.approx(25.0)
    assert float(total.data) == pytest.approx(50.5)
    only_v, _, _ = loss_total(pred_off, pred, target_j, octa, LossWeights(1.0, 0.0))
    assert float(only_v.data) == pytest.approx(1.0)
    zero, _, _ = loss_total(pred, pred, octa.joint_regressor @ pred, octa)
    assert float(zero.data) == 0.0


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(joint_reduction="max")


# -- gradients ---------------------------------------------------------------------

def test_gradients_match_finite_differences_small():
    model, verts, mask, targets, joints, full = gradient_fixture(seed=1)
    small = MAEModel(model.template, ModelConfig(dim=8, blocks=2, heads=2, seed=1, dtype="float64"))
    rng = np.random.default_rng(1)
    for t in small.params.values():
        t.data = t.data + 0.3 * rng.standard_normal(t.data.shape)
    errs = gradient_check(small, verts, mask, targets, joints, full)
    assert set(errs) == set(small.params) | {"forward"}
    assert errs["forward"] < 1e-12
    assert max(errs.values()) < 1e-6, max(errs, key=errs.get)


def test_reference_loss_replicas_match_single_evaluations():
    model, verts, mask, targets, joints, _ = gradient_fixture(seed=2)
    state = {k: t.data[None] for k, t in model.params.items() if k != "upsample"}
    rng = np.random.default_rng(2)
    w = model.params["blocks.3.mlp.fc1.weight"].data
    stack = w + 0.1 * rng.standard_normal((3,) + w.shape)
    both = reference_loss({**state, "blocks.3.mlp.fc1.weight": stack}, model.config, model.template,
                          verts, mask, targets, joints)
    for r in range(3):
        one = reference_loss({**state, "blocks.3.mlp.fc1.weight": stack[r:r + 1]}, model.config, model.template,
                             verts, mask, targets, joints)
        assert one[0] == pytest.approx(both[r], rel=1e-12)


def test_mask_token_gradient_iff_masked(octa):
    model = MAEModel(octa, ModelConfig(seed=0, dtype="float64"))
    rng = np.random.default_rng(0)
    v = octa.vertices_full[None] + 0.1 * rng.standard_normal((2, 6, 3))
    j = np.einsum("jn,snk->sjk", octa.joint_regressor, v + 0.05)
    full_mask = np.ones((2, 6), bool)
    g = backward(model, v, full_mask, v + 0.05, j)
    assert not np.any(g["mask_token"])
    some = full_mask.copy()
    some[1, 2] = False
    g = backward(model, v, some, v + 0.05, j)
    assert np.any(g["mask_token"])


def test_zero_lr_step_changes_nothing(octa):
    model = MAEModel(octa, ModelConfig(seed=0))
    v = octa.vertices_full[None] * 1.1
    backward(model, v, np.ones((1, 6), bool), octa.vertices_full[None], (octa.joint_regressor @ octa.vertices_full)[None])
    before = {k: t.data.copy() for k, t in model.params.items()}
    opt = AdamW(model.params, weight_decay=1e-4)
    opt.step(0.0)
    for k, t in model.params.items():
        assert t.data.tobytes() == before[k].tobytes()
    opt.step(1e-3)
    assert any(t.data.tobytes() != before[k].tobytes() for k, t in model.params.items())


def test_weight_decay_is_decoupled(octa):
    model = MAEModel(octa, ModelConfig(seed=0, dtype="float64"))
    w = model.params["head.weight"]
    w.grad = np.zeros_like(w.data)
    before = w.data.copy()
    AdamW({"head.weight": w}, weight_decay=0.1).step(0.5)
    np.testing.assert_allclose(w.data, before * (1 - 0.5 * 0.1))


# -- schedule ------------------------------------------------------------------------

def test_lr_schedule_endpoints():
    cfg = TrainConfig(steps=2000)
    warm = round(0.15 * 2000)
    assert lr_at(warm, cfg) == 1e-3
    assert lr_at(1999, cfg) <= 1e-9
    assert lr_at(0, cfg) < lr_at(warm - 1, cfg) < 1e-3
    lrs = [lr_at(s, cfg) for s in range(2000)]
    assert np.all(np.diff(lrs[:warm + 1]) > 0) and np.all(np.diff(lrs[warm:]) <= 0)
    assert math.isclose(lr_at(warm + (1999 - warm) // 2, cfg), 5e-4, rel_tol=1e-2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(extra_mask_rate=1.2)
    ft = TrainConfig.fine_tune(10)
    assert (ft.lr, ft.weight_decay, ft.warmup_fraction) == (1e-5, 1e-6, 0.0)
    assert lr_at(0, ft) == 1e-5


# -- training pairs ------------------------------------------------------------------

def test_clean_sample_copies_visible_vertices(template):
    s = make_sample(template, template.vertices_full, CameraPose(), INTR,
                    AugmentConfig(extra_mask_rate=0.0, noise_variance=0.0), sample_rng(0, 0))
    coarse = template.downsample_map @ template.vertices_full
    vis = visible_vertices(coarse, template.coarse_triangles, CameraPose(), INTR)
    np.testing.assert_array_equal(s.input.mask, vis)
    np.testing.assert_array_equal(s.input.vertices[vis], coarse[vis])
    assert not np.any(s.input.vertices[~vis])
    np.testing.assert_array_equal(s.target_vertices, coarse)
    np.testing.assert_allclose(s.target_joints, template.joint_regressor @ coarse)
    np.testing.assert_array_equal(s.target_full, template.vertices_full)


def test_full_drop_rejected(template):
    with pytest.raises(SampleRejected):
        make_sample(template, template.vertices_full, CameraPose(), INTR,
                    AugmentConfig(extra_mask_rate=1.0), sample_rng(0, 0))


def test_wrong_vertex_count(template):
    with pytest.raises(ValueError):
        make_sample(template, np.zeros((7, 3)), CameraPose(), INTR, AugmentConfig(), sample_rng(0, 0))


@pytest.fixture
def cached_visibility(monkeypatch):
    # visibility of a fixed mesh and camera is deterministic; compute it once
    cache = {}

    def vis(vertices, triangles, pose, intr, tol):
        key = vertices.tobytes()
        if key not in cache:
            cache[key] = visible_vertices(vertices, triangles, pose, intr, tol)
        return cache[key]

    monkeypatch.setattr(training, "visible_vertices", vis)


def test_drop_fraction_monte_carlo(template, cached_visibility):
    kept = visible = 0
    for i in range(10_000):
        s = make_sample(template, template.vertices_full, CameraPose(), INTR,
                        AugmentConfig(noise_variance=0.0), sample_rng(42, i))
        if i == 0:
            base = make_sample(template, template.vertices_full, CameraPose(), INTR,
                               AugmentConfig(extra_mask_rate=0.0, noise_variance=0.0), sample_rng(0, 0))
        kept += s.input.mask.sum()
        visible += base.input.mask.sum()
    assert abs(1.0 - kept / visible - 0.60) <= 0.01


def test_noise_variance_monte_carlo(template, cached_visibility):
    draws = []
    i = 0
    while sum(len(d) for d in draws) < 1_000_000:
        s = make_sample(template, template.vertices_full, CameraPose(), INTR,
                        AugmentConfig(extra_mask_rate=0.0), sample_rng(7, i))
        m = s.input.mask
        draws.append((s.input.vertices[m] - s.target_vertices[m]).ravel())
        i += 1
    noise = np.concatenate(draws)
    assert abs(noise.var() - 0.0005) <= 0.1 * 0.0005
    assert abs(noise.mean()) < 1e-4


def test_generation_is_order_independent(template):
    meshes = pose_set(template, 4, 0)
    all4 = generate_samples(template, meshes, seed=3)
    # sample i depends only on (seed, i)
    alone = make_sample(template, meshes[2], CameraPose(), INTR, AugmentConfig(), sample_rng(3, 2))
    np.testing.assert_array_equal(all4.inputs[2], alone.input.vertices)
    again = generate_samples(template, meshes, seed=3)
    np.testing.assert_array_equal(all4.inputs, again.inputs)


def test_sample_set_round_trip(tmp_path, template):
    data = generate_samples(template, pose_set(template, 3, 0), seed=1)
    data.save(tmp_path)
    back = SampleSet.load(tmp_path)
    for k, a in data.arrays().items():
        np.testing.assert_array_equal(back.arrays()[k], a)
    assert back.ids == data.ids and back.meta["seed"] == 1
    back.check(template)


# -- optimisation loop -------------------------------------------------------------

def tiny(octa, seed=0):
    rng = np.random.default_rng(seed)
    v = octa.vertices_full[None] + 0.1 * rng.standard_normal((8, 6, 3))
    mask = rng.random((8, 6)) < 0.7
    mask[:, :2] = True
    t = v + 0.02 * rng.standard_normal(v.shape)
    j = np.einsum("jn,snk->sjk", octa.joint_regressor, t)
    return SampleSet(np.where(mask[..., None], v, 0.0), mask, t, j)


def small_model(octa, seed=0):
    return MAEModel(octa, ModelConfig(dim=8, blocks=2, heads=2, seed=seed))


def test_training_is_bitwise_reproducible(octa, tmp_path):
    data = tiny(octa)
    cfg = TrainConfig(steps=30, batch_size=4, seed=5)
    a = train(small_model(octa), data, cfg, out_dir=tmp_path / "a")
    b = train(small_model(octa), data, cfg, out_dir=tmp_path / "b")
    assert a.model.digest() == b.model.digest()
    assert (tmp_path / "a" / "params.tens").read_bytes() == (tmp_path / "b" / "params.tens").read_bytes()
    assert a.log == b.log


def test_loss_decreases(octa):
    res = train(small_model(octa), tiny(octa), TrainConfig(steps=400, batch_size=8, lr=3e-3))
    losses = [r["loss_total"] for r in res.log]
    assert np.median(losses[:100]) > np.median(losses[-100:])


def test_checkpoints_and_log(octa, tmp_path):
    res = train(small_model(octa), tiny(octa), TrainConfig(steps=6, batch_size=4, checkpoint_every=3),
                out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
    assert (tmp_path / "step_000003" / "params.tens").exists()
    assert (tmp_path / "step_000006" / "header.json").exists()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 6 == len(res.log)


def test_nonfinite_loss_halts(octa, tmp_path):
    model = small_model(octa)
    model.params["head.bias"].data[:] = np.nan
    res = train(model, tiny(octa), TrainConfig(steps=5, batch_size=4), out_dir=tmp_path)
    assert res.halted and res.log == []
    assert (tmp_path / "params.tens").exists()
