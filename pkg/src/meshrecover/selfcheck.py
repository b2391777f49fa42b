"""Built-in oracle checks: grid search vs brute force, visibility vs ray casting, gradients vs finite differences."""
from __future__ import annotations

import numpy as np

from .camera import CameraPose, Intrinsics, VIS_REL_TOL, visible_vertices, visible_vertices_bruteforce
from .mae import MAEModel, ModelConfig
from .matching import nearest_uv, nearest_uv_bruteforce
from .mesh import TemplateError, TemplateMesh, load_template
from .toy import bundled_template, octahedron_template
from .training import LossWeights, loss_total


# -- gradient check ---------------------------------------------------------------

def gradient_fixture(seed: int = 0, spread: float = 0.3):
    """Float64 model on the octahedron with generic (non-initial) parameters and a 2-sample batch."""
    tpl = octahedron_template()
    model = MAEModel(tpl, ModelConfig(seed=seed, dtype="float64"))
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = t.data + spread * rng.standard_normal(t.data.shape)
    verts = tpl.vertices_full[None] * 0.5 + 0.1 * rng.standard_normal((2, 6, 3))
    mask = np.array([[1, 1, 0, 1, 0, 1], [0, 1, 1, 1, 1, 0]], dtype=bool)
    targets = tpl.vertices_full[None] * 0.5 + 0.1 * rng.standard_normal((2, 6, 3))
    joints = np.einsum("jn,snk->sjk", tpl.joint_regressor, targets)
    full = targets + 0.05 * rng.standard_normal(targets.shape)
    return model, verts, mask, targets, joints, full


def _objective(model, verts, mask, targets, joints, weights):
    pred, _, _ = model.forward_batch(verts, mask)
    total, _, _ = loss_total(pred, targets, joints, model.template, weights)
    return total, pred


def _aux(model, pred_const, full):
    up = model.upsample(pred_const)
    return (up - full).abs().sum() * (1.0 / full[..., 0].size)


# The finite differences run through a separate plain-numpy forward pass in
# which every parameter carries a leading replica axis, so a whole chunk of
# single-entry perturbations is evaluated in one call.

def _replicate(a: np.ndarray) -> np.ndarray:
    """(R, *shape) -> (R, 1, ..., *shape) padded to four axes for (R, B, N, d) activations."""
    return a.reshape(a.shape[:1] + (1,) * (4 - a.ndim) + a.shape[1:])


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_loss(params: dict[str, np.ndarray], config: ModelConfig, template: TemplateMesh,
                   verts, mask, targets, joints, weights: LossWeights = LossWeights()) -> np.ndarray:
    """Training objective per replica; every entry of ``params`` is shaped (R or 1, *shape)."""
    P = {k: _replicate(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    mean = np.array([verts[i][mask[i]].mean(axis=0) for i in range(len(verts))])
    scale = np.array([np.sqrt(((verts[i][mask[i]] - mean[i]) ** 2).mean()) for i in range(len(verts))])
    x = (verts - mean[:, None]) / scale[:, None, None]
    x = np.where(mask[..., None], x, 0.0)
    z = np.where(mask[..., None], x[None] @ P["embed"], P["mask_token"]) + P["pos_embed"]
    _, B, N, d = z.shape
    H = config.heads
    hd = d // H

    def split(t):
        return t.reshape(len(t), B, N, H, hd).transpose(0, 1, 3, 2, 4)

    for b in range(config.blocks):
        p = f"blocks.{b}."
        y = _ln(z, P[p + "ln1.gamma"], P[p + "ln1.beta"])
        q, k, v = (split(y @ P[p + f"attn.{n}.weight"] + P[p + f"attn.{n}.bias"]) for n in "qkv")
        s = q @ k.swapaxes(-1, -2) / np.sqrt(hd)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        o = (s / s.sum(axis=-1, keepdims=True)) @ v
        o = o.transpose(0, 1, 3, 2, 4).reshape(len(o), B, N, d)
        z = z + o @ P[p + "attn.proj.weight"] + P[p + "attn.proj.bias"]
        y = _ln(z, P[p + "ln2.gamma"], P[p + "ln2.beta"]) @ P[p + "mlp.fc1.weight"] + P[p + "mlp.fc1.bias"]
        y = 0.5 * y * (1 + np.tanh(np.sqrt(2 / np.pi) * (y + 0.044715 * y ** 3)))
        z = z + y @ P[p + "mlp.fc2.weight"] + P[p + "mlp.fc2.bias"]
    out = _ln(z, P["norm.gamma"], P["norm.beta"]) @ P["head.weight"] + P["head.bias"]
    pred = out * scale[:, None, None] + mean[:, None]
    lv = np.abs(pred - targets).sum(axis=(1, 2, 3)) / (B * N)
    r = template.joint_regressor @ pred - joints
    lj = (r * r).sum(axis=(1, 2, 3)) / B
    if weights.joint_reduction == "mean":
        lj = lj / template.joint_regressor.shape[0]
    return weights.lambda_v * lv + weights.lambda_3d * lj


def _central_differences(f, base: np.ndarray, h: float, chunk: int) -> np.ndarray:
    """Gradient of f at ``base`` where f maps an (R, *shape) stack to R values."""
    flat = base.reshape(-1)
    grad = np.empty(flat.size)
    for s in range(0, flat.size, chunk):
        idx = np.arange(s, min(s + chunk, flat.size))
        bump = np.zeros((len(idx), flat.size))
        bump[np.arange(len(idx)), idx] = h
        up = f((flat + bump).reshape((-1,) + base.shape))
        down = f((flat - bump).reshape((-1,) + base.shape))
        grad[idx] = (up - down) / (2 * h)
    return grad.reshape(base.shape)


ZERO_FLOOR = 1e-4


def gradient_check(model: MAEModel, verts, mask, targets, joints, full=None,
                   weights: LossWeights = LossWeights(), h: float = 1e-5, chunk: int = 256) -> dict[str, float]:
    """Relative max-norm error between reverse-mode and central-difference gradients, per parameter.

    The network parameters are checked on the vertex+joint loss; the
    upsampling matrix on the full-resolution L1 with the coarse prediction
    held fixed, which is how training uses it. Some gradients vanish
    identically (key biases cancel inside the softmax), so the denominator
    never drops below ``ZERO_FLOOR`` times the largest gradient entry of the
    whole model. The ``"forward"`` entry compares the two loss evaluations.
    """
    verts, mask = np.asarray(verts, dtype=np.float64), np.asarray(mask, dtype=bool)
    model.zero_grad()
    total, pred = _objective(model, verts, mask, targets, joints, weights)
    total.backward()
    pred_const = pred.data.copy()
    if full is not None:
        _aux(model, pred_const, full).backward()
    state = {k: t.data.astype(np.float64)[None] for k, t in model.params.items() if k != "upsample"}
    ref = float(reference_loss(state, model.config, model.template, verts, mask, targets, joints, weights)[0])
    pairs = {}
    for name, t in model.params.items():
        ad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if name == "upsample":
            if full is None:
                continue
            f = lambda u: np.abs(u[:, None] @ pred_const[None] - full).sum(axis=(1, 2, 3)) / full[..., 0].size
        else:
            f = lambda x, name=name: reference_loss({**state, name: x}, model.config, model.template,
                                                    verts, mask, targets, joints, weights)
        pairs[name] = (ad, _central_differences(f, t.data.astype(np.float64), h, chunk))
    model.zero_grad()
    top = max(max(np.abs(ad).max(), np.abs(fd).max()) for ad, fd in pairs.values())
    errors = {"forward": abs(ref - float(total.data)) / max(abs(ref), 1e-300)}
    for name, (ad, fd) in pairs.items():
        scale = max(np.abs(fd).max(), np.abs(ad).max(), ZERO_FLOOR * top)
        errors[name] = 0.0 if scale == 0 else float(np.abs(ad - fd).max() / scale)
    return errors


# -- geometry checks --------------------------------------------------------------

def nearest_check(rng: np.random.Generator, instances: int, max_n: int = 2000, max_m: int = 10000,
                  eps: float = 0.01) -> int:
    """Number of instances where grid and brute-force nearest neighbours disagree."""
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(1, max_m + 1))
        pts = rng.random((m, 2))
        if rng.random() < 0.3:   # quantised points force exact distance ties
            pts = np.round(pts * 40) / 40
        q = rng.random((n, 2))
        if rng.random() < 0.3:
            q = np.round(q * 40) / 40
        gi, gd = nearest_uv(q, pts, eps)
        bi, bd = nearest_uv_bruteforce(q, pts)
        bad += int(not (np.array_equal(gi, bi) and np.array_equal(gd, bd)))
    return bad


def random_toy_mesh(rng: np.random.Generator, max_triangles: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """A few random blobs in front of the default camera: perturbed UV spheres."""
    from .toy import grid_faces
    verts, tris = [], []
    offset = 0
    budget = max_triangles
    for _ in range(int(rng.integers(1, 4))):
        rings = int(rng.integers(3, 9))
        segs = int(rng.integers(4, 13))
        faces = grid_faces(rings, segs)
        if len(faces) > budget:
            break
        budget -= len(faces)
        theta = np.linspace(0, np.pi, rings + 2)[1:-1]
        phi = np.arange(segs) * 2 * np.pi / segs
        ring_pts = np.stack([np.sin(theta)[:, None] * np.cos(phi), np.cos(theta)[:, None] * np.ones_like(phi),
                             np.sin(theta)[:, None] * np.sin(phi)], axis=-1).reshape(-1, 3)
        sphere = np.concatenate([[[0, 1, 0]], ring_pts, [[0, -1, 0]]])
        radius = rng.uniform(0.1, 0.4) * (1 + 0.3 * rng.standard_normal(len(sphere)).clip(-2, 2))[:, None]
        centre = np.array([rng.uniform(-0.4, 0.4), 0.9 + rng.uniform(-0.4, 0.4), rng.uniform(-0.5, 0.5)])
        verts.append(sphere * radius + centre)
        tris.append(faces + offset)
        offset += len(sphere)
    return np.concatenate(verts), np.concatenate(tris)


def visibility_check(rng: np.random.Generator, meshes: int, intr: Intrinsics = Intrinsics(),
                     tol: float = VIS_REL_TOL) -> int:
    """Number of vertices (over all meshes) where the fast path and the oracle disagree."""
    bad = 0
    for _ in range(meshes):
        v, f = random_toy_mesh(rng)
        pose = CameraPose.frontal(azimuth_deg=float(rng.uniform(-30, 30)))
        fast = visible_vertices(v, f, pose, intr, tol)
        slow = visible_vertices_bruteforce(v, f, pose, intr, tol)
        bad += int((fast != slow).sum())
    return bad


def template_check(template: TemplateMesh | None = None, path=None) -> tuple[bool, str]:
    try:
        tpl = load_template(path) if path is not None else (template or bundled_template())
        tpl.validate()
    except TemplateError as exc:
        return False, f"{exc.code}: {exc}"
    return True, f"{tpl.n_full} full / {tpl.n_coarse} coarse vertices, {tpl.n_joints} joints"


def run_selfcheck(template_path=None, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    report = []
    ok, detail = template_check(path=template_path)
    report.append(("template invariants", ok, detail))
    bad = nearest_check(rng, 20, max_n=500, max_m=2000)
    report.append(("grid nearest neighbour vs brute force", bad == 0, f"{bad} of 20 instances differ"))
    bad = visibility_check(rng, 5)
    report.append(("visibility vs ray-cast oracle", bad == 0, f"{bad} vertices differ over 5 meshes"))
    model, verts, mask, targets, joints, full = gradient_fixture(seed)
    # a reduced-width model keeps the full finite-difference sweep quick
    small = MAEModel(model.template, ModelConfig(dim=8, blocks=2, heads=2, seed=seed, dtype="float64"))
    for t in small.params.values():
        t.data = t.data + 0.3 * rng.standard_normal(t.data.shape)
    errs = gradient_check(small, verts, mask, targets, joints, full)
    worst = max(errs, key=errs.get)
    report.append(("gradients vs central differences", errs[worst] < 1e-6,
                   f"max relative error {errs[worst]:.2e} ({worst})"))
    return report
