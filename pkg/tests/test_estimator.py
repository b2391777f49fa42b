import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from meshrecover.camera import CameraPose, Intrinsics, render_depth_uv
from meshrecover.estimator import MeshCompleter, PartialMeshTransformer, check_partial, pack_partial
from meshrecover.matching import PartialMesh
from meshrecover.toy import bundled_template, octahedron_template

SMALL = dict(dim=8, blocks=1, heads=2, steps=30, batch_size=4, random_state=3)


def octa_data(n=8, seed=0):
    tpl = octahedron_template()
    rng = np.random.default_rng(seed)
    y = tpl.vertices_full[None] * (1 + 0.1 * rng.standard_normal((n, 1, 1))) + 0.02 * rng.standard_normal((n, 6, 3))
    mask = rng.random((n, 6)) < 0.6
    mask[:, :2] = True
    X = np.concatenate([np.where(mask[..., None], y, 0.0), mask[..., None].astype(float)], axis=-1)
    return tpl, X, y


def test_params_and_clone():
    tpl = octahedron_template()
    est = MeshCompleter(tpl, **SMALL)
    params = est.get_params()
    assert params["dim"] == 8 and params["template"] is tpl
    twin = clone(est)
    assert twin.get_params()["steps"] == 30 and not hasattr(twin, "model_")
    est.set_params(lr=5e-3)
    assert est.lr == 5e-3


def test_fit_predict_score():
    tpl, X, y = octa_data()
    est = MeshCompleter(tpl, **SMALL).fit(X, y)
    pred = est.predict(X)
    assert pred.shape == y.shape and np.all(np.isfinite(pred))
    assert est.predict_full(X).shape == (len(X), tpl.n_full, 3)
    score = est.score(X, y)
    assert score == pytest.approx(-np.linalg.norm(pred - y, axis=-1).mean() * 1000)
    assert len(est.history_) > 0


def test_fit_is_seeded():
    tpl, X, y = octa_data()
    a = MeshCompleter(tpl, **SMALL).fit(X, y).predict(X)
    b = clone(MeshCompleter(tpl, **SMALL)).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_predict_before_fit():
    tpl, X, _ = octa_data()
    with pytest.raises(NotFittedError):
        MeshCompleter(tpl).predict(X)


def test_input_validation():
    tpl, X, y = octa_data()
    est = MeshCompleter(tpl, **SMALL)
    with pytest.raises(ValueError, match="targets are required"):
        est.fit(X)
    with pytest.raises(ValueError, match="targets shaped"):
        est.fit(X, y[:, :5])
    bad = X.copy()
    bad[0, 0, 3] = 0.5
    with pytest.raises(ValueError, match="0 or 1"):
        check_partial(bad)
    with pytest.raises(ValueError, match="vertices per mesh"):
        check_partial(X, 7)
    with pytest.raises(ValueError, match="a template"):
        MeshCompleter(None).fit(X, y)


def test_check_partial_zeroes_hidden_and_accepts_objects():
    v = np.arange(9.0).reshape(3, 3)
    mask = np.array([True, False, True])
    packed = pack_partial([PartialMesh(np.where(mask[:, None], v, 0.0), mask)])
    verts, m = check_partial(packed)
    np.testing.assert_array_equal(m[0], mask)
    X = packed.copy()
    X[0, 1, :3] = np.nan    # hidden entries may hold anything
    verts, _ = check_partial(X)
    assert np.all(verts[0, 1] == 0)
    verts2, _ = check_partial(PartialMesh(np.where(mask[:, None], v, 0.0), mask))
    np.testing.assert_array_equal(verts2, verts)


def test_transformer_matches_frames():
    tpl = bundled_template()
    frame = render_depth_uv(tpl.vertices_full, tpl.triangles, tpl.uv, CameraPose.frontal(), Intrinsics())
    tr = PartialMeshTransformer(tpl).fit()
    out = tr.transform([frame])
    assert out.shape == (1, tpl.n_coarse, 4)
    verts, mask = check_partial(out)
    assert 0.3 < mask.mean() < 0.6
    # world frame: matched points sit near their anchor vertices on the template
    err = np.linalg.norm(verts[0][mask[0]] - tpl.vertices_full[tpl.coarse_index][mask[0]], axis=-1)
    assert err.max() < 0.05
    cam = PartialMeshTransformer(tpl, world_frame=False).fit().transform(frame)
    assert not np.allclose(cam[0, mask[0], :3], out[0, mask[0], :3])


def test_transformer_validation():
    with pytest.raises(ValueError):
        PartialMeshTransformer().fit()
    with pytest.raises(ValueError):
        PartialMeshTransformer(bundled_template(), eps=0).fit()
    with pytest.raises(NotFittedError):
        PartialMeshTransformer(bundled_template()).transform([])
