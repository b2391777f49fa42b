"""Procedural toy humanoid used as the bundled template and pose source.

The body is a lat-long sphere topology (two poles, ``rings x segments``
grid) whose horizontal cross-sections trace a head, torso, two hanging arms
and two legs. The coarse mesh keeps every other ring and segment. Poses
come from a handful of rigid part rotations blended with smooth weights;
this stays inside the asset generator and is not a body model.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .mesh import TemplateMesh, load_template, save_template

HEIGHT = 1.7
JOINT_NAMES = ("pelvis", "chest", "neck", "head",
               "l_shoulder", "r_shoulder", "l_hand", "r_hand",
               "l_hip", "r_hip", "l_foot", "r_foot")
JOINTS_REST = np.array([
    [0.0, 0.92, 0.0], [0.0, 1.25, 0.0], [0.0, 1.46, 0.0], [0.0, 1.60, 0.0],
    [0.24, 1.38, 0.0], [-0.24, 1.38, 0.0], [0.24, 0.86, 0.0], [-0.24, 0.86, 0.0],
    [0.10, 0.84, 0.0], [-0.10, 0.84, 0.0], [0.10, 0.10, 0.0], [-0.10, 0.10, 0.0],
])
PART_NAMES = ("torso", "head", "l_arm", "r_arm", "l_leg", "r_leg")

# cross-section profiles, keyed by t in [0, 1] from head top to feet
_CORE_T = [0.0, 0.02, 0.06, 0.11, 0.14, 0.17, 0.25, 0.40, 0.50, 0.56, 0.62, 1.0]
_CORE_AX = [0.02, 0.05, 0.095, 0.085, 0.05, 0.15, 0.16, 0.14, 0.16, 0.10, 0.02, 0.02]
_CORE_AZ = [0.02, 0.05, 0.105, 0.095, 0.05, 0.09, 0.10, 0.09, 0.10, 0.06, 0.02, 0.02]
_ARM_T = [0.0, 0.16, 0.20, 0.35, 0.50, 0.545, 1.0]
_ARM_R = [0.0, 0.0, 0.055, 0.045, 0.042, 0.0, 0.0]
_LEG_T = [0.0, 0.50, 0.58, 0.75, 0.95, 1.0]
_LEG_R = [0.0, 0.0, 0.08, 0.065, 0.045, 0.03]
ARM_X = 0.24
LEG_X = 0.10


def _profile(ts, values):
    return PchipInterpolator(ts, values)


def _radial(phi: np.ndarray, t: float) -> np.ndarray:
    """Outer radius of the cross-section at height ``t`` along direction phi.

    phi = 0 faces +z (front); x = r sin(phi), z = r cos(phi).
    """
    dx, dz = np.sin(phi), np.cos(phi)
    ax = float(_profile(_CORE_T, _CORE_AX)(t))
    az = float(_profile(_CORE_T, _CORE_AZ)(t))
    r = 1.0 / np.sqrt((dx / ax) ** 2 + (dz / az) ** 2)
    r = np.maximum(r, 0.02)
    arm = float(_profile(_ARM_T, _ARM_R)(t))
    leg = float(_profile(_LEG_T, _LEG_R)(t))
    for cx, rad in ((ARM_X, arm), (-ARM_X, arm), (LEG_X, leg), (-LEG_X, leg)):
        if rad <= 0:
            continue
        along = cx * dx
        perp2 = cx * cx - along * along
        hit = perp2 < rad * rad
        far = along + np.sqrt(np.clip(rad * rad - perp2, 0.0, None))
        r = np.where(hit & (far > r), far, r)
    return r


def _cross_section(t: float, segments: int, dense: int = 2048, round_off: float = 0.03) -> np.ndarray:
    """``segments`` points on the contour at equal arc length, starting at the back.

    Corners of the union outline are rounded by a periodic Gaussian filter of
    width ``round_off`` meters along the arc before resampling.
    """
    phi = np.linspace(-np.pi, np.pi, dense, endpoint=False)
    r = _radial(phi, t)
    pts = np.stack([r * np.sin(phi), r * np.cos(phi)], axis=1)
    for _ in range(2):   # resample evenly, then blur at a fixed arc-length width
        closed = np.vstack([pts, pts[:1]])
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
        even = np.linspace(0.0, s[-1], dense, endpoint=False)
        pts = np.stack([np.interp(even, s, closed[:, 0]), np.interp(even, s, closed[:, 1])], axis=1)
        sigma = round_off / (s[-1] / dense)
        k = np.arange(-int(4 * sigma) - 1, int(4 * sigma) + 2)
        g = np.exp(-0.5 * (k / sigma) ** 2)
        g /= g.sum()
        pts = np.stack([np.convolve(np.concatenate([pts[-len(k):, a], pts[:, a], pts[:len(k), a]]),
                                    g, mode="same")[len(k):-len(k)] for a in range(2)], axis=1)
    closed = np.vstack([pts, pts[:1]])
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
    target = (np.arange(segments) + 0.5) / segments * s[-1]
    return np.stack([np.interp(target, s, closed[:, 0]), np.interp(target, s, closed[:, 1])], axis=1)


def grid_faces(rings: int, segments: int) -> np.ndarray:
    """Triangles of a lat-long sphere: vertex 0 is the top pole, then rings, then bottom pole."""
    S = segments
    bottom = 1 + rings * S
    ring = lambda i, j: 1 + i * S + (j % S)  # noqa: E731
    faces = [[0, ring(0, j + 1), ring(0, j)] for j in range(S)]
    for i in range(rings - 1):
        for j in range(S):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
    faces += [[bottom, ring(rings - 1, j), ring(rings - 1, j + 1)] for j in range(S)]
    return np.asarray(faces, dtype=np.int64)


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    signed_volume = np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0
    return faces if signed_volume > 0 else faces[:, ::-1].copy()


def humanoid_rest(rings: int = 25, segments: int = 24, smoothing_passes: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rest vertices, faces and spherical-unwrap UVs of the toy body."""
    ts = (np.arange(rings) + 1.0) / (rings + 1.0)
    verts = [[0.0, HEIGHT, 0.0]]
    uvs = [[0.5, 1.0]]
    for i, t in enumerate(ts):
        xz = _cross_section(t, segments)
        y = HEIGHT * (1.0 - t)
        for j in range(segments):
            verts.append([xz[j, 0], y, xz[j, 1]])
            uvs.append([(j + 0.5) / segments, 1.0 - t])
    verts.append([0.0, 0.0, 0.0])
    uvs.append([0.5, 0.0])
    V = np.asarray(verts)
    # soften ring-to-ring tangential drift of the arc-length sampling
    grid = V[1:-1].reshape(rings, segments, 3)
    for _ in range(smoothing_passes):
        padded = np.concatenate([np.repeat(V[None, :1], segments, 1), grid,
                                 np.repeat(V[None, -1:], segments, 1)])
        blurred = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
        grid = np.concatenate([blurred[..., :1], grid[..., 1:2], blurred[..., 2:]], axis=-1)
    V[1:-1] = grid.reshape(-1, 3)
    F = _orient_outward(V, grid_faces(rings, segments))
    return V, F, np.asarray(uvs)


def _coarse_selection(rings: int, segments: int) -> tuple[np.ndarray, int, int]:
    """Full-vertex indices kept by the coarse grid (odd rings, even segments, poles)."""
    keep_rings = np.arange(1, rings, 2)
    keep_segs = np.arange(0, segments, 2)
    idx = [0] + [1 + i * segments + j for i in keep_rings for j in keep_segs] + [1 + rings * segments]
    return np.asarray(idx), len(keep_rings), len(keep_segs)


def _bspline(x):
    x = abs(x)
    if x < 1.0:
        return (4.0 - 6.0 * x * x + 3.0 * x ** 3) / 6.0
    if x < 2.0:
        return (2.0 - x) ** 3 / 6.0
    return 0.0


def interpolation_operator(rings: int, segments: int) -> np.ndarray:
    """(F, N) cubic B-spline basis of the coarse grid sampled at the full grid.

    Coarse rings sit on odd full rings, so ``rings`` must be odd and the two
    poles land on the same knot spacing. Knots past a pole continue onto the
    antipodal segment of the first (last) coarse ring.
    """
    if rings % 2 == 0 or segments % 4 != 0:
        raise ValueError("need an odd ring count and a segment count divisible by 4")
    S, half = segments, segments // 2
    F = 2 + rings * S
    centers, _, _ = _coarse_selection(rings, segments)
    col = {int(v): k for k, v in enumerate(centers)}
    top, bottom = 0, F - 1

    def coarse_col(r, c):
        """Column of coarse knot (full ring r, full segment c), r in [-3, rings + 2]."""
        if r == -1:
            return col[top]
        if r == rings:
            return col[bottom]
        if r < -1:
            r, c = -2 - r, c + half
        elif r > rings:
            r, c = 2 * rings - r, c + half
        return col[1 + r * S + (c % S)]

    knots_r = range(-3, rings + 3, 2)
    knots_c = range(0, S, 2)
    W = np.zeros((F, len(centers)))
    for i in list(range(rings)) + [-1, rings]:
        row = top if i == -1 else bottom if i == rings else None
        for j in range(S) if row is None else [None]:
            f = row if row is not None else 1 + i * S + j
            for r in knots_r:
                wr = _bspline((i - r) / 2.0)
                if wr == 0.0:
                    continue
                if r in (-1, rings):
                    W[f, coarse_col(r, 0)] += wr
                    continue
                for c in knots_c:
                    if j is None:   # pole vertex: average the ring uniformly
                        W[f, coarse_col(r, c)] += wr / len(knots_c)
                        continue
                    d = (j - c + half) % S - half
                    wc = _bspline(d / 2.0)
                    if wc:
                        W[f, coarse_col(r, c)] += wr * wc
    return W


def downsample_operator(interp: np.ndarray) -> np.ndarray:
    """Row-stochastic full -> coarse map: each coarse vertex averages the full
    vertices under its interpolation hat, weighted by the hat."""
    D = interp.T.copy()
    return D / D.sum(axis=1, keepdims=True)


def regressor_operator(coarse_rest: np.ndarray, joints: np.ndarray, k: int = 8) -> np.ndarray:
    """Each joint averages its k nearest coarse vertices with inverse-distance weights."""
    R = np.zeros((len(joints), len(coarse_rest)))
    for j, p in enumerate(joints):
        d = np.linalg.norm(coarse_rest - p, axis=1)
        near = np.argsort(d, kind="stable")[:k]
        w = 1.0 / (d[near] + 0.02)
        R[j, near] = w / w.sum()
    return R


def vertex_parts(vertices: np.ndarray) -> np.ndarray:
    """Hard part label per vertex, from the rest-pose skinning weights."""
    W = part_weights(vertices)
    torso = 1.0 - W.sum(axis=1, keepdims=True)
    return np.argmax(np.concatenate([torso, W], axis=1), axis=1)


def build_template(rings: int = 25, segments: int = 24) -> TemplateMesh:
    V, F, UV = humanoid_rest(rings, segments)
    _, cr, cs = _coarse_selection(rings, segments)
    D = downsample_operator(interpolation_operator(rings, segments))
    CF = _orient_outward(D @ V, grid_faces(cr, cs))
    coarse_rest = D @ V
    R = regressor_operator(coarse_rest, JOINTS_REST)
    t = TemplateMesh(vertices_full=V, triangles=F, uv=UV, downsample_map=D, joint_regressor=R,
                     coarse_triangles=CF, parts=vertex_parts(coarse_rest),
                     joint_names=JOINT_NAMES)
    t.validate()
    return t


# ------------------------------------------------------------------- poses

def _smoothstep(x, lo, hi):
    s = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def part_weights(v: np.ndarray) -> np.ndarray:
    """(F, 5) blend weights for head, left arm, right arm, left leg, right leg."""
    x, y = v[:, 0], v[:, 1]
    upper = _smoothstep(y, 0.70, 0.76)
    head = _smoothstep(y, 1.44, 1.50)
    arm = _smoothstep(np.abs(x), 0.175, 0.195) * upper
    leg = _smoothstep(0.86 - y, 0.0, 0.10)
    side = _smoothstep(x, -0.03, 0.03)
    W = np.stack([head, arm * (x > 0), arm * (x < 0), leg * side, leg * (1.0 - side)], axis=1)
    total = W.sum(axis=1, keepdims=True)
    return np.where(total > 1.0, W / np.maximum(total, 1e-12), W)


def _rot(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def random_pose_params(rng: np.random.Generator) -> dict[str, float]:
    deg = np.deg2rad
    u = lambda lo, hi: float(deg(rng.uniform(lo, hi)))  # noqa: E731
    return {
        "l_arm_flex": u(-35, 50), "l_arm_abduct": u(0, 45),
        "r_arm_flex": u(-35, 50), "r_arm_abduct": u(0, 45),
        "l_leg_flex": u(-25, 30), "l_leg_abduct": u(0, 12),
        "r_leg_flex": u(-25, 30), "r_leg_abduct": u(0, 12),
        "head_yaw": u(-35, 35), "head_pitch": u(-15, 20),
        "spine_bend": u(-10, 25), "spine_twist": u(-20, 20), "spine_side": u(-10, 10),
        "root_yaw": u(-20, 20),
    }


def pose_vertices(v: np.ndarray, params: dict[str, float], weights: np.ndarray | None = None) -> np.ndarray:
    """Deform rest vertices ``v`` (any resolution) by the pose ``params``."""
    W = part_weights(v) if weights is None else weights
    p = params
    parts = [
        (_rot("y", p["head_yaw"]) @ _rot("x", -p["head_pitch"]), JOINTS_REST[2]),
        (_rot("x", -p["l_arm_flex"]) @ _rot("z", p["l_arm_abduct"]), JOINTS_REST[4]),
        (_rot("x", -p["r_arm_flex"]) @ _rot("z", -p["r_arm_abduct"]), JOINTS_REST[5]),
        (_rot("x", -p["l_leg_flex"]) @ _rot("z", p["l_leg_abduct"]), JOINTS_REST[8]),
        (_rot("x", -p["r_leg_flex"]) @ _rot("z", -p["r_leg_abduct"]), JOINTS_REST[9]),
    ]
    out = v.copy()
    for k, (R, c) in enumerate(parts):
        moved = (v - c) @ R.T + c
        out += W[:, k:k + 1] * (moved - v)
    pelvis = JOINTS_REST[0]
    Rs = _rot("y", p["spine_twist"]) @ _rot("z", p["spine_side"]) @ _rot("x", p["spine_bend"])
    ws = _smoothstep(v[:, 1], pelvis[1] - 0.05, pelvis[1] + 0.15)[:, None]
    out = out + ws * (((out - pelvis) @ Rs.T + pelvis) - out)
    Rr = _rot("y", p["root_yaw"])
    return (out - pelvis) @ Rr.T + pelvis


def pose_set(template: TemplateMesh, count: int, seed: int) -> np.ndarray:
    """``count`` posed full-resolution meshes, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    W = part_weights(template.vertices_full)
    return np.stack([pose_vertices(template.vertices_full, random_pose_params(rng), W)
                     for _ in range(count)])


ASSET_DIR = Path(__file__).with_name("assets") / "toy_template"


def bundled_template() -> TemplateMesh:
    """The toy template shipped with the package (regenerated if missing)."""
    if not (ASSET_DIR / "template.obj").exists():
        save_template(build_template(), ASSET_DIR)
    return load_template(ASSET_DIR)


def octahedron_template() -> TemplateMesh:
    """Six-vertex template with identity downsampling; the gradient-check fixture."""
    V = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    F = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    UV = np.array([[0.9, 0.5], [0.1, 0.5], [0.5, 0.9], [0.5, 0.1], [0.5, 0.5], [0.3, 0.3]])
    R = np.array([[0.5, 0.5, 0, 0, 0, 0], [0, 0, 0.25, 0.25, 0.25, 0.25]])
    return TemplateMesh(vertices_full=V, triangles=F, uv=UV, downsample_map=np.eye(6),
                        joint_regressor=R, coarse_triangles=F)
