import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshrecover.mesh import (TemplateError, TemplateMesh, downsample, load_template, mean_edge_length,
                              read_obj, regress_joints, save_template, upsample, write_obj)
from meshrecover.tensorio import write_tensor
from meshrecover.toy import ASSET_DIR


def tiny(D=None, R=None, uv=None):
    V = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    F = np.array([[0, 1, 2]])
    uv = np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]) if uv is None else uv
    D = np.eye(3) if D is None else D
    R = np.full((1, D.shape[0]), 1.0 / D.shape[0]) if R is None else R
    return TemplateMesh(V, F, uv, D, R)


def test_bundled_template_sizes(template):
    template.validate()
    assert template.n_full == 602 and template.n_coarse == 146 and template.n_joints == 12
    assert np.allclose(template.downsample_map.sum(axis=1), 1, atol=1e-6)
    assert np.allclose(template.joint_regressor.sum(axis=1), 1, atol=1e-6)


def test_identity_downsample_leaves_vertices(rng):
    t = tiny()
    v = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(downsample(t, v), v)
    np.testing.assert_array_equal(upsample(t, v, np.eye(3)), v)


def test_downsample_origin_stays_at_origin(template):
    assert np.all(downsample(template, np.zeros((template.n_full, 3))) == 0)


def test_midpoint_map():
    V = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    t = TemplateMesh(V, np.array([[0, 1, 2]]), np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]),
                     np.array([[0.5, 0.5, 0.0]]), np.array([[1.0]]))
    np.testing.assert_array_equal(downsample(t, V), [[1.0, 0.0, 0.0]])


def test_dimension_mismatch_reports_sizes(template):
    with pytest.raises(ValueError, match=r"expects \(\.\.\., 602, 3\), got \(10, 3\)"):
        downsample(template, np.zeros((10, 3)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        upsample(template, np.zeros((5, 3)))


def test_pinv_upsample_recovers_rest_pose(template):
    full = upsample(template, template.coarse_rest)
    err = np.linalg.norm(full - template.vertices_full, axis=1).mean()
    assert err <= 0.05 * mean_edge_length(template.vertices_full, template.triangles)


def test_downsample_after_upsample_is_identity(template):
    c = template.coarse_rest
    back = downsample(template, upsample(template, c))
    assert np.linalg.norm(back - c) / np.linalg.norm(c) < 1e-4


def test_upsample_of_zero_is_zero(template):
    assert np.all(upsample(template, np.zeros((template.n_coarse, 3))) == 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_operators_are_linear(a, b, seed):
    from meshrecover.toy import bundled_template
    t = bundled_template()
    r = np.random.default_rng(seed)
    v1, v2 = r.normal(size=(2, t.n_full, 3))
    for f in (lambda v: downsample(t, v), lambda v: upsample(t, downsample(t, v))):
        lhs = f(a * v1 + b * v2)
        rhs = a * f(v1) + b * f(v2)
        assert np.linalg.norm(lhs - rhs) <= 1e-6 * max(np.linalg.norm(rhs), 1e-12) + 1e-12


def test_regressor_constant_mesh(template):
    p = np.array([0.3, -1.0, 2.0])
    joints = regress_joints(template, np.tile(p, (template.n_coarse, 1)))
    np.testing.assert_allclose(joints, np.tile(p, (template.n_joints, 1)), atol=1e-6)


def test_regressor_one_hot_and_uniform(rng):
    V = rng.normal(size=(3, 3))
    t = tiny(R=np.array([[0, 1.0, 0], [1 / 3, 1 / 3, 1 / 3]]))
    j = regress_joints(t, V)
    assert np.array_equal(j[0], V[1])
    np.testing.assert_allclose(j[1], V.mean(axis=0), rtol=1e-12)


def test_regressor_translation_equivariant(template, rng):
    v = template.coarse_rest + rng.normal(scale=0.01, size=(template.n_coarse, 3))
    t = np.array([0.5, -0.2, 1.0])
    np.testing.assert_allclose(regress_joints(template, v + t), regress_joints(template, v) + t, atol=1e-12)


@pytest.fixture
def template_copy(tmp_path):
    dst = tmp_path / "tpl"
    shutil.copytree(ASSET_DIR, dst)
    return dst


def test_load_save_round_trip(template, tmp_path):
    save_template(template, tmp_path / "t")
    again = load_template(tmp_path / "t")
    assert again.digest() == template.digest()
    np.testing.assert_array_equal(again.coarse_triangles, template.coarse_triangles)


def test_uv_out_of_range_rejected(template_copy):
    V, F, UV = read_obj(template_copy / "template.obj")
    UV[3, 0] = 1.5
    write_obj(template_copy / "template.obj", V, F, UV)
    with pytest.raises(TemplateError, match="uv out of range") as info:
        load_template(template_copy)
    assert info.value.code == "uv_range"


def test_index_out_of_bounds_rejected(template_copy):
    V, F, UV = read_obj(template_copy / "template.obj")
    text = (template_copy / "template.obj").read_text()
    n = len(V)
    text += f"f {n + 1}/1 1/1 2/2\n"   # index == vertex count (0-based)
    (template_copy / "template.obj").write_text(text)
    with pytest.raises(TemplateError) as info:
        load_template(template_copy)
    assert info.value.code in ("index_bounds",)
    assert "index out of bounds" in str(info.value)


def test_missing_uv_rejected(template_copy):
    V, F, _ = read_obj(template_copy / "template.obj")
    write_obj(template_copy / "template.obj", V, F)
    with pytest.raises(TemplateError) as info:
        load_template(template_copy)
    assert info.value.code == "missing_uv"


def test_non_stochastic_rows_rejected(template, template_copy):
    D = template.downsample_map.copy()
    D[0] *= 1.1
    write_tensor(template_copy / "downsample.mat", D)
    with pytest.raises(TemplateError) as info:
        load_template(template_copy)
    assert info.value.code == "non_stochastic"


def test_regressor_rows_rejected(template, template_copy):
    R = template.joint_regressor.copy()
    R[0, 0] += 0.5
    write_tensor(template_copy / "regressor.mat", R)
    with pytest.raises(TemplateError) as info:
        load_template(template_copy)
    assert info.value.code == "regressor_rows"


def test_meta_mismatch_rejected(template_copy):
    meta = json.loads((template_copy / "meta.json").read_text())
    meta["N"] = 10
    (template_copy / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(TemplateError):
        load_template(template_copy)


def test_disconnected_mesh_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], float)
    F = np.array([[0, 1, 2], [3, 4, 5]])
    uv = np.linspace(0.1, 0.9, 12).reshape(6, 2)
    with pytest.raises(TemplateError) as info:
        TemplateMesh(V, F, uv, np.eye(6), np.full((1, 6), 1 / 6)).validate()
    assert info.value.code == "disconnected"


def test_duplicate_coarse_uv_rejected():
    with pytest.raises(TemplateError) as info:
        tiny(uv=np.array([[0.1, 0.1], [0.1, 0.1], [0.5, 0.9]])).validate()
    assert info.value.code == "duplicate_uv"


def test_obj_polygon_and_negative_indices(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -3 -2\n")
    V, F, UV = read_obj(tmp_path / "q.obj")
    assert UV is None and F.tolist() == [[0, 1, 2], [0, 2, 3], [0, 1, 2]]


def test_obj_uv_seam_rejected(tmp_path):
    (tmp_path / "s.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 0.5 0.5\n"
                                    "f 1/1 2/2 3/3\nf 1/4 3/3 2/2\n")
    with pytest.raises(TemplateError) as info:
        read_obj(tmp_path / "s.obj")
    assert info.value.code == "uv_seam"
