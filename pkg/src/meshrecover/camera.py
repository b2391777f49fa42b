"""Virtual pinhole depth camera: rasterisation, ray-cast visibility, lifting.

Pixel ``(x, y)`` samples the image plane at integer coordinates, so the
ray of pixel ``(x, y)`` is ``K^-1 [x, y, 1]``. Camera space is x right,
y down, z forward; poses map world to camera, ``p_cam = R p_world + t``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

NEAR = 1e-6
VIS_REL_TOL = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 127.5
    cy: float = 127.5
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.9, 2.5]))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "CameraPose":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    @classmethod
    def frontal(cls, distance: float = 2.5, height: float = 0.9, azimuth_deg: float = 0.0) -> "CameraPose":
        """Camera on a circle around the vertical body axis, looking at it; 0 deg faces +z."""
        a = np.deg2rad(azimuth_deg)
        eye = np.array([distance * np.sin(a), height, distance * np.cos(a)])
        return cls.look_at(eye, [0.0, height, 0.0])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass
class DepthUVFrame:
    depth: np.ndarray                   # (H, W) camera z in meters, 0 = background
    uv: np.ndarray                      # (H, W, 2), zero off the body
    intrinsics: Intrinsics
    pose: CameraPose | None = None
    part_id: np.ndarray | None = None   # (H, W) optional chart/part label
    empty: bool = False

    def __post_init__(self):
        H, W = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (H, W) or self.uv.shape != (H, W, 2):
            raise ValueError(f"frame maps must be ({H}, {W}) / ({H}, {W}, 2), got "
                             f"{self.depth.shape} / {self.uv.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth must be finite and non-negative")
        body = self.depth > 0
        if np.any(self.uv[~body] != 0):
            raise ValueError("uv must be zero outside the depth > 0 support")
        if np.any(self.uv[body] < 0) or np.any(self.uv[body] > 1):
            raise ValueError("uv out of range [0, 1] on the body support")


def project(points_cam: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-space points -> (pixel coordinates (M, 2), depth (M,))."""
    z = points_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intr.fx * points_cam[:, 0] / z + intr.cx
        y = intr.fy * points_cam[:, 1] / z + intr.cy
    return np.stack([x, y], axis=1), z


def lift(frame: DepthUVFrame, pixel) -> np.ndarray:
    x, y = int(pixel[0]), int(pixel[1])
    d = float(frame.depth[y, x])
    if d <= 0:
        raise ValueError(f"no body at pixel ({x}, {y})")
    return d * (frame.intrinsics.K_inv @ np.array([x, y, 1.0]))


# ------------------------------------------------------------ rasteriser

def render_depth_uv(vertices: np.ndarray, triangles: np.ndarray, uv: np.ndarray,
                    pose: CameraPose, intr: Intrinsics, part_ids: np.ndarray | None = None,
                    ) -> DepthUVFrame:
    """Z-buffer rasterisation with perspective-correct depth and UV.

    Triangles with any vertex at or behind the camera plane are skipped.
    Depth ties between triangles go to the lower triangle index.
    """
    H, W = intr.height, intr.width
    depth = np.zeros((H, W))
    uvmap = np.zeros((H, W, 2))
    parts = None if part_ids is None else np.zeros((H, W), dtype=np.uint8)
    cam = pose.to_camera(np.asarray(vertices, dtype=np.float64))
    if not np.any(cam[:, 2] > 0):
        logger.warning("mesh entirely behind the camera; returning an empty frame")
        return DepthUVFrame(depth, uvmap, intr, pose, parts, empty=True)
    tri_idx, px, py, bary = _covered_pairs(cam, triangles, intr)
    if len(tri_idx):
        zt = cam[triangles[tri_idx], 2]                          # (P, 3)
        w = bary / zt
        inv_z = w.sum(axis=1)
        z = 1.0 / inv_z
        pix = py * W + px
        order = np.lexsort((tri_idx, z, pix))
        pix_sorted = pix[order]
        first = order[np.concatenate([[True], pix_sorted[1:] != pix_sorted[:-1]])]
        depth.ravel()[pix[first]] = z[first]
        tuv = uv[triangles[tri_idx[first]]]                      # (Q, 3, 2)
        uv_val = np.einsum("qk,qkc->qc", w[first], tuv) / inv_z[first, None]
        uvmap.reshape(-1, 2)[pix[first]] = np.clip(uv_val, 0.0, 1.0)
        if parts is not None:
            # a pixel takes the label of the triangle corner nearest in barycentric terms
            corner = np.argmax(bary[first], axis=1)
            parts.ravel()[pix[first]] = part_ids[triangles[tri_idx[first], corner]]
    empty = not np.any(depth > 0)
    return DepthUVFrame(depth, uvmap, intr, pose, parts, empty=empty)


def _covered_pairs(cam: np.ndarray, triangles: np.ndarray, intr: Intrinsics):
    """All (triangle, pixel) pairs where the pixel sample lies inside the
    projected triangle, with screen-space barycentrics."""
    tri = np.asarray(triangles)
    front = np.all(cam[tri, 2] > NEAR, axis=1)
    tri_ids = np.nonzero(front)[0]
    pix, _ = project(cam, intr)
    p = pix[tri[tri_ids]]                                        # (T, 3, 2)
    x0 = np.clip(np.ceil(p[..., 0].min(axis=1)), 0, intr.width).astype(np.int64)
    x1 = np.clip(np.floor(p[..., 0].max(axis=1)), -1, intr.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(p[..., 1].min(axis=1)), 0, intr.height).astype(np.int64)
    y1 = np.clip(np.floor(p[..., 1].max(axis=1)), -1, intr.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e, np.zeros((0, 3))
    owner = np.repeat(np.arange(len(tri_ids)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[owner] + local % nx[owner]
    py = y0[owner] + local // nx[owner]
    a, b, c = p[owner, 0], p[owner, 1], p[owner, 2]
    q = np.stack([px, py], axis=1).astype(np.float64)
    area = _edge(a, b, c)
    w0 = _edge(b, c, q)
    w1 = _edge(c, a, q)
    w2 = _edge(a, b, q)
    sgn = np.sign(area)
    inside = (area != 0) & (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
    bary = np.stack([w0, w1, w2], axis=1)[inside] / area[inside, None]
    return tri_ids[owner[inside]], px[inside], py[inside], bary


def _edge(a, b, c):
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


# ------------------------------------------------------------ ray casting

def ray_triangle_t(origin: np.ndarray, dirs: np.ndarray, v0: np.ndarray, v1: np.ndarray,
                   v2: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Moller-Trumbore for broadcastable rays and triangles.

    Returns the ray parameter ``t`` of the hit (``origin + t * dir``) or
    ``inf`` on a miss. Degenerate (zero-area) triangles never hit.
    """
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("...k,...k->...", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = np.einsum("...k,...k->...", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("...k,...k->...", dirs, qvec) * inv
    t = np.einsum("...k,...k->...", e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalised directions suffice for sign tests)."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, triangles[:, k], fn)
    return n


def _frustum_mask(cam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    pix, z = project(cam, intr)
    with np.errstate(invalid="ignore"):
        return ((z > NEAR) & (pix[:, 0] >= -0.5) & (pix[:, 0] < intr.width - 0.5)
                & (pix[:, 1] >= -0.5) & (pix[:, 1] < intr.height - 0.5))


def _occluded(cam: np.ndarray, tris: np.ndarray, targets: np.ndarray, tol_rel: float,
              cand: np.ndarray | None = None) -> np.ndarray:
    """For each target (camera-space point) test the segment camera -> target
    against triangles (all, or per-target candidate lists in ``cand``)."""
    origin = np.zeros(3)
    dist = np.linalg.norm(targets, axis=1)
    # hits count only if strictly nearer than the target by tol_rel * depth
    limit = 1.0 - tol_rel * targets[:, 2] / np.where(dist > 0, dist, 1.0)
    v0, v1, v2 = cam[tris[:, 0]], cam[tris[:, 1]], cam[tris[:, 2]]
    if cand is None:
        t = ray_triangle_t(origin, targets[:, None, :], v0[None], v1[None], v2[None])
        return np.any(t < limit[:, None], axis=1)
    rows, cols = cand
    t = ray_triangle_t(origin, targets[rows], v0[cols], v1[cols], v2[cols])
    occ = np.zeros(len(targets), dtype=bool)
    np.logical_or.at(occ, rows, t < limit[rows])
    return occ


def _nondegenerate(cam: np.ndarray, tris: np.ndarray) -> np.ndarray:
    v0, v1, v2 = cam[tris[:, 0]], cam[tris[:, 1]], cam[tris[:, 2]]
    return np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1) > 0


def visible_vertices(vertices: np.ndarray, triangles: np.ndarray, pose: CameraPose,
                     intr: Intrinsics, tol_rel: float = VIS_REL_TOL, mode: str = "vertex",
                     tile: int = 16) -> np.ndarray:
    """Boolean visibility per vertex by ray casting from the camera centre.

    ``mode="vertex"`` casts one ray per vertex; ``mode="face"`` marks a vertex
    visible when the centroid of any incident front-facing triangle is.
    Triangles are binned into ``tile``-pixel screen tiles so each ray only
    meets triangles whose screen bounding box contains its pixel.
    """
    cam = pose.to_camera(np.asarray(vertices, dtype=np.float64))
    tris = np.asarray(triangles)
    tris = tris[_nondegenerate(cam, tris)]
    if mode == "face":
        return _face_visibility(cam, tris, intr, tol_rel, lambda tg: _binned_occlusion(cam, tris, tg, intr, tile, tol_rel))
    if mode != "vertex":
        raise ValueError(f"unknown visibility mode {mode!r}")
    vis = _frontfacing(cam, tris) & _frustum_mask(cam, intr)
    idx = np.nonzero(vis)[0]
    if len(idx):
        vis[idx] = ~_binned_occlusion(cam, tris, cam[idx], intr, tile, tol_rel)
    return vis


def visible_vertices_bruteforce(vertices: np.ndarray, triangles: np.ndarray, pose: CameraPose,
                                intr: Intrinsics, tol_rel: float = VIS_REL_TOL,
                                mode: str = "vertex") -> np.ndarray:
    """Reference visibility: every ray against every triangle, no culling."""
    cam = pose.to_camera(np.asarray(vertices, dtype=np.float64))
    tris = np.asarray(triangles)
    tris = tris[_nondegenerate(cam, tris)]
    if mode == "face":
        return _face_visibility(cam, tris, intr, tol_rel, lambda tg: _occluded(cam, tris, tg, tol_rel))
    vis = _frontfacing(cam, tris) & _frustum_mask(cam, intr)
    for i in np.nonzero(vis)[0]:
        vis[i] = not _occluded(cam, tris, cam[i:i + 1], tol_rel)[0]
    return vis


def _frontfacing(cam: np.ndarray, tris: np.ndarray) -> np.ndarray:
    n = vertex_normals(cam, tris)
    return np.einsum("ij,ij->i", n, -cam) > 0


def _face_visibility(cam, tris, intr, tol_rel, occluded_fn) -> np.ndarray:
    v0, v1, v2 = cam[tris[:, 0]], cam[tris[:, 1]], cam[tris[:, 2]]
    centroid = (v0 + v1 + v2) / 3.0
    fn = np.cross(v1 - v0, v2 - v0)
    face_ok = (np.einsum("ij,ij->i", fn, -centroid) > 0) & _frustum_mask(centroid, intr)
    ids = np.nonzero(face_ok)[0]
    if len(ids):
        face_ok[ids] = ~occluded_fn(centroid[ids])
    vis = np.zeros(len(cam), dtype=bool)
    for k in range(3):
        vis[tris[face_ok, k]] = True
    return vis


def _binned_occlusion(cam, tris, targets, intr, tile, tol_rel) -> np.ndarray:
    """Occlusion test using screen-tile candidate lists (conservative culling)."""
    if len(tris) == 0:
        return np.zeros(len(targets), dtype=bool)
    pix, _ = project(cam, intr)
    tp = pix[tris]                                               # (T, 3, 2)
    in_front = np.all(cam[tris, 2] > NEAR, axis=1)
    nxt = -(-intr.width // tile) + 2
    nyt = -(-intr.height // tile) + 2

    def tile_of(v, n):
        return np.clip(np.floor(v / tile).astype(np.int64) + 1, 0, n - 1)

    pad = 1.0
    with np.errstate(invalid="ignore"):
        tx0 = tile_of(np.nan_to_num(tp[..., 0].min(axis=1) - pad, nan=-1e9, neginf=-1e9, posinf=1e9), nxt)
        tx1 = tile_of(np.nan_to_num(tp[..., 0].max(axis=1) + pad, nan=1e9, neginf=-1e9, posinf=1e9), nxt)
        ty0 = tile_of(np.nan_to_num(tp[..., 1].min(axis=1) - pad, nan=-1e9, neginf=-1e9, posinf=1e9), nyt)
        ty1 = tile_of(np.nan_to_num(tp[..., 1].max(axis=1) + pad, nan=1e9, neginf=-1e9, posinf=1e9), nyt)
    # straddling triangles have no meaningful projection: test them everywhere
    tx0[~in_front], ty0[~in_front] = 0, 0
    tx1[~in_front], ty1[~in_front] = nxt - 1, nyt - 1
    qpix, _ = project(targets, intr)
    qx = tile_of(qpix[:, 0], nxt)
    qy = tile_of(qpix[:, 1], nyt)
    qtile = qy * nxt + qx
    occ = np.zeros(len(targets), dtype=bool)
    for t_id in np.unique(qtile):
        ty, tx = divmod(int(t_id), nxt)
        cand = np.nonzero((tx0 <= tx) & (tx <= tx1) & (ty0 <= ty) & (ty <= ty1))[0]
        if len(cand) == 0:
            continue
        q = np.nonzero(qtile == t_id)[0]
        pairs = (np.repeat(np.arange(len(q)), len(cand)), np.tile(np.arange(len(cand)), len(q)))
        occ[q] = _occluded(cam, tris[cand], targets[q], tol_rel, pairs)
    return occ


def visible_vertices_zbuffer(vertices: np.ndarray, triangles: np.ndarray, pose: CameraPose,
                             intr: Intrinsics, depth: np.ndarray | None = None,
                             rel_tol: float = 0.01) -> np.ndarray:
    """Fast path: compare each vertex depth against the rendered depth buffer.

    A vertex is visible when it is front-facing, inside the image and no
    deeper than ``(1 + rel_tol)`` times the depth at the pixel its
    projection rounds to. Empty pixels never occlude.
    """
    cam = pose.to_camera(np.asarray(vertices, dtype=np.float64))
    tris = np.asarray(triangles)
    if depth is None:
        uv0 = np.zeros((len(vertices), 2))
        depth = render_depth_uv(vertices, tris, uv0, pose, intr).depth
    vis = _frontfacing(cam, tris[_nondegenerate(cam, tris)]) & _frustum_mask(cam, intr)
    pix, z = project(cam, intr)
    idx = np.nonzero(vis)[0]
    x = np.clip(np.rint(pix[idx, 0]).astype(np.int64), 0, intr.width - 1)
    y = np.clip(np.rint(pix[idx, 1]).astype(np.int64), 0, intr.height - 1)
    d = depth[y, x]
    nearest = np.where(d > 0, d, np.inf)
    vis[idx] = z[idx] <= nearest * (1.0 + rel_tol)
    return vis
