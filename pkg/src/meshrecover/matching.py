"""Lift body pixels to 3D and match them to template vertices through UV space."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera import DepthUVFrame
from .mesh import TemplateMesh

logger = logging.getLogger(__name__)

DEFAULT_EPS = 0.01


@dataclass
class LiftedPointSet:
    points: np.ndarray                 # (M, 3)
    uvs: np.ndarray                    # (M, 2)
    part_id: np.ndarray | None = None  # (M,)
    pixels: np.ndarray | None = None   # (M, 2) integer (x, y), row-major order

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PartialMesh:
    vertices: np.ndarray   # (N, 3); rows with mask == 0 carry no information
    mask: np.ndarray       # (N,) bool

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.mask.shape != (len(self.vertices),):
            raise ValueError("mask needs one flag per vertex")
        if not np.all(np.isfinite(self.vertices[self.mask])):
            raise ValueError("visible vertices must be finite")

    @property
    def n_visible(self) -> int:
        return int(self.mask.sum())


def lift_all(frame: DepthUVFrame) -> LiftedPointSet:
    """One camera-space point per body pixel, in row-major pixel order."""
    ys, xs = np.nonzero(frame.depth > 0)
    d = frame.depth[ys, xs]
    rays = np.stack([xs, ys, np.ones_like(xs)], axis=1).astype(np.float64) @ frame.intrinsics.K_inv.T
    pts = d[:, None] * rays
    part = None if frame.part_id is None else frame.part_id[ys, xs].astype(np.int64)
    return LiftedPointSet(pts, frame.uv[ys, xs].astype(np.float64), part, np.stack([xs, ys], axis=1))


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    du = a[..., 0] - b[..., 0]
    dv = a[..., 1] - b[..., 1]
    return du * du + dv * dv


def nearest_uv_bruteforce(queries: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """O(N M) nearest neighbour; ties go to the lowest point index."""
    if len(points) == 0:
        return np.full(len(queries), -1), np.full(len(queries), np.inf)
    idx = np.empty(len(queries), dtype=np.int64)
    best = np.empty(len(queries))
    pu, pv = np.ascontiguousarray(points[:, 0]), np.ascontiguousarray(points[:, 1])
    for s in range(0, len(queries), 128):
        du = queries[s:s + 128, 0, None] - pu
        dv = queries[s:s + 128, 1, None] - pv
        d2 = du * du + dv * dv
        idx[s:s + 128] = np.argmin(d2, axis=1)
        best[s:s + 128] = d2[np.arange(len(d2)), idx[s:s + 128]]
    return idx, np.sqrt(best)


class UVGrid:
    """Uniform grid hash over [0, 1]^2 for exact nearest-neighbour queries.

    Queries scan square rings of cells outwards until the best candidate is
    closer than the unexplored region, then fall back to a full scan.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        self.n = max(1, int(np.ceil(1.0 / self.cell)))
        cx, cy = self._cell_of(self.points)
        key = cy * self.n + cx
        self.order = np.argsort(key, kind="stable")     # keeps point order within a cell
        counts = np.bincount(key, minlength=self.n * self.n)
        self.start = np.concatenate([[0], np.cumsum(counts)])

    def _cell_of(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = np.clip(np.floor(p / self.cell).astype(np.int64), 0, self.n - 1)
        return c[:, 0], c[:, 1]

    def query(self, queries: np.ndarray, max_ring: int = 3) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64)
        nq = len(queries)
        best = np.full(nq, -1)
        best_d2 = np.full(nq, np.inf)
        if len(self.points) == 0:
            return best, best_d2
        qx, qy = self._cell_of(queries)
        pending = np.arange(nq)
        for ring in range(1, max_ring + 1):
            if len(pending) == 0:
                break
            idx, d2 = self._scan_block(queries[pending], qx[pending], qy[pending], ring)
            best[pending], best_d2[pending] = idx, d2
            # points outside the block lie at least `ring` cells away (minus in-cell offset)
            reach = self._block_clearance(queries[pending], qx[pending], qy[pending], ring)
            reach = reach * (1.0 - 1e-9) - 1e-12   # guard against cell rounding at boundaries
            pending = pending[~(best_d2[pending] < reach * reach)]
        if len(pending):
            idx, d = nearest_uv_bruteforce(queries[pending], self.points)
            best[pending], best_d2[pending] = idx, d * d
        return best, np.sqrt(best_d2)

    def _block_clearance(self, q, qx, qy, ring) -> np.ndarray:
        """Distance from each query to the nearest point not covered by its block."""
        lo_x = (qx - ring) * self.cell
        hi_x = (qx + ring + 1) * self.cell
        lo_y = (qy - ring) * self.cell
        hi_y = (qy + ring + 1) * self.cell
        gaps = np.stack([
            np.where(qx - ring > 0, q[:, 0] - lo_x, np.inf),
            np.where(qx + ring < self.n - 1, hi_x - q[:, 0], np.inf),
            np.where(qy - ring > 0, q[:, 1] - lo_y, np.inf),
            np.where(qy + ring < self.n - 1, hi_y - q[:, 1], np.inf),
        ], axis=1)
        return gaps.min(axis=1)

    def _scan_block(self, q, qx, qy, ring):
        offsets = np.arange(-ring, ring + 1)
        ox, oy = np.meshgrid(offsets, offsets, indexing="xy")
        cx = qx[:, None] + ox.ravel()[None]
        cy = qy[:, None] + oy.ravel()[None]
        valid = (cx >= 0) & (cx < self.n) & (cy >= 0) & (cy < self.n)
        cell_id = np.where(valid, cy * self.n + cx, 0)
        s = np.where(valid, self.start[cell_id], 0)
        e = np.where(valid, self.start[cell_id + 1], 0)
        counts = (e - s).ravel()
        qid = np.repeat(np.repeat(np.arange(len(q)), cx.shape[1]), counts)
        total = int(counts.sum())
        first = np.repeat(s.ravel(), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        pidx = self.order[first + local]
        d2 = _sq_dist(q[qid], self.points[pidx])
        best = np.full(len(q), -1)
        best_d2 = np.full(len(q), np.inf)
        if total:
            srt = np.lexsort((pidx, d2, qid))
            head = srt[np.concatenate([[True], qid[srt][1:] != qid[srt][:-1]])]
            best[qid[head]] = pidx[head]
            best_d2[qid[head]] = d2[head]
        return best, best_d2


def nearest_uv(queries: np.ndarray, points: np.ndarray, cell: float) -> tuple[np.ndarray, np.ndarray]:
    return UVGrid(points, cell).query(queries)


def match(points: LiftedPointSet, template: TemplateMesh, eps: float = DEFAULT_EPS,
          accelerated: bool = True) -> PartialMesh:
    """Per coarse vertex, take the lifted point nearest in UV; keep it if closer than ``eps``.

    When both the points and the template carry part labels, candidates are
    restricted to points of the vertex's own part.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    N = template.n_coarse
    quv = template.coarse_uv
    if len(points) == 0:
        logger.warning("no lifted points; every vertex is masked out")
        return PartialMesh(np.zeros((N, 3)), np.zeros(N, dtype=bool))
    idx, dist = _match_indices(points, template, quv, eps, accelerated)
    found = idx >= 0
    verts = np.zeros((N, 3))
    verts[found] = points.points[idx[found]]
    return PartialMesh(verts, found & (dist < eps))


def _match_indices(points, template, quv, eps, accelerated):
    search = (lambda q, p: nearest_uv(q, p, eps)) if accelerated else nearest_uv_bruteforce
    if points.part_id is None or template.parts is None:
        return search(quv, points.uvs)
    idx = np.full(len(quv), -1)
    dist = np.full(len(quv), np.inf)
    for part in np.unique(template.parts):
        q = np.nonzero(template.parts == part)[0]
        p = np.nonzero(points.part_id == part)[0]
        if len(p) == 0:
            continue
        i, d = search(quv[q], points.uvs[p])
        idx[q], dist[q] = p[i], d
    return idx, dist
