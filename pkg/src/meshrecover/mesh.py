"""Template body mesh and the linear resolution-change operators.

A template directory holds::

    template.obj     full-resolution mesh with one ``vt`` record per vertex
    downsample.mat   (N, F) row-stochastic tensor, full -> coarse
    regressor.mat    (J, N) joint regressor over coarse vertices, rows sum to 1
    meta.json        {"N", "J", "units", optional "joint_names",
                      "coarse_faces", "parts"}

The coarse UV of vertex ``i`` is the UV of the full vertex carrying the
largest weight in row ``i`` of the downsample map.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .tensorio import read_tensor, write_tensor

STOCHASTIC_TOL = 1e-6


class TemplateError(ValueError):
    """Template invariant violation; ``code`` names the broken invariant."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    vertices_full: np.ndarray          # (F, 3) meters
    triangles: np.ndarray              # (T, 3) int
    uv: np.ndarray                     # (F, 2) in [0, 1]
    downsample_map: np.ndarray         # (N, F)
    joint_regressor: np.ndarray        # (J, N)
    coarse_triangles: np.ndarray | None = None
    parts: np.ndarray | None = None    # (N,) int part id per coarse vertex
    joint_names: tuple[str, ...] = ()
    units: str = "m"
    upsample_init: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.upsample_init is None:
            object.__setattr__(self, "upsample_init", np.linalg.pinv(self.downsample_map))
        for name in ("vertices_full", "uv", "downsample_map", "joint_regressor", "upsample_init"):
            getattr(self, name).setflags(write=False)

    @property
    def n_full(self) -> int:
        return self.vertices_full.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.downsample_map.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def coarse_uv(self) -> np.ndarray:
        return self.uv[self.coarse_index]

    @property
    def coarse_index(self) -> np.ndarray:
        """Full-vertex index that anchors each coarse vertex (argmax of its row)."""
        return np.argmax(self.downsample_map, axis=1)

    @property
    def full_parts(self) -> np.ndarray | None:
        """Part id per full vertex: that of the coarse vertex weighing most in its upsampling row."""
        if self.parts is None:
            return None
        out = self.parts[np.argmax(np.abs(self.upsample_init), axis=1)]
        out[self.coarse_index] = self.parts
        return out

    @property
    def coarse_rest(self) -> np.ndarray:
        return self.downsample_map @ self.vertices_full

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices_full, self.triangles, self.uv, self.downsample_map,
                    self.joint_regressor):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def validate(self) -> None:
        validate_template(self)


def validate_template(t: TemplateMesh) -> None:
    F = t.vertices_full.shape[0]
    if t.vertices_full.ndim != 2 or t.vertices_full.shape[1] != 3:
        raise TemplateError("shape", f"vertices must be (F, 3), got {t.vertices_full.shape}")
    if not np.all(np.isfinite(t.vertices_full)):
        raise TemplateError("non_finite", "vertex coordinates must be finite")
    if t.uv is None or t.uv.shape != (F, 2):
        raise TemplateError("missing_uv", "every vertex needs one UV coordinate")
    if np.any(t.uv < 0.0) or np.any(t.uv > 1.0):
        raise TemplateError("uv_range", "uv out of range [0, 1]")
    tri = t.triangles
    if tri.ndim != 2 or tri.shape[1] != 3:
        raise TemplateError("shape", f"triangles must be (T, 3), got {tri.shape}")
    if tri.size and (tri.min() < 0 or tri.max() >= F):
        raise TemplateError("index_bounds", f"triangle index out of bounds for {F} vertices")
    _check_connected(tri, F, "mesh")
    D = t.downsample_map
    if D.ndim != 2 or D.shape[1] != F:
        raise TemplateError("shape", f"downsample map must be (N, {F}), got {D.shape}")
    if np.any(D < 0) or np.any(np.abs(D.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise TemplateError("non_stochastic", "downsample rows must be non-negative and sum to 1")
    cuv = t.coarse_uv
    if len(np.unique(cuv, axis=0)) != len(cuv):
        raise TemplateError("duplicate_uv", "coarse vertices must have unique UV coordinates")
    J = t.joint_regressor
    if J.ndim != 2 or J.shape[1] != D.shape[0]:
        raise TemplateError("shape", f"regressor must be (J, {D.shape[0]}), got {J.shape}")
    if np.any(np.abs(J.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise TemplateError("regressor_rows", "joint regressor rows must sum to 1")
    if t.coarse_triangles is not None:
        ct = t.coarse_triangles
        if ct.size and (ct.min() < 0 or ct.max() >= D.shape[0]):
            raise TemplateError("index_bounds", "coarse triangle index out of bounds")
    if t.parts is not None and t.parts.shape != (D.shape[0],):
        raise TemplateError("shape", "parts must carry one id per coarse vertex")


def _check_connected(tri: np.ndarray, n: int, what: str) -> None:
    if n == 0:
        raise TemplateError("empty", f"{what} has no vertices")
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    cols = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise TemplateError("disconnected", f"{what} has {ncomp} connected components")


def _check_count(arr: np.ndarray, expected: int, what: str) -> None:
    if arr.shape[-2] != expected or arr.shape[-1] != 3:
        raise ValueError(
            f"dimension mismatch: {what} expects (..., {expected}, 3), got {tuple(arr.shape)}")


def downsample(template: TemplateMesh, full_vertices) -> np.ndarray:
    v = np.asarray(full_vertices, dtype=np.float64)
    _check_count(v, template.n_full, "downsample")
    return template.downsample_map @ v


def upsample(template: TemplateMesh, coarse, params=None):
    """Map coarse vertices to full resolution with ``params`` (default: the
    pseudoinverse initialisation). Works on arrays and autograd tensors."""
    if params is None:
        params = template.upsample_init
    _check_count(coarse, template.n_coarse, "upsample")
    if params.shape != (template.n_full, template.n_coarse):
        raise ValueError(f"dimension mismatch: upsample params {tuple(params.shape)}")
    return params @ coarse


def regress_joints(template: TemplateMesh, coarse):
    _check_count(coarse, template.n_coarse, "regress_joints")
    return template.joint_regressor @ coarse


# ---------------------------------------------------------------- OBJ files

def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return (vertices, triangles, per-vertex uv or None).

    Faces referencing ``vt`` indices are honoured; a vertex that is paired
    with two different UVs is rejected since the atlas is per vertex.
    """
    verts, uvs, faces, face_uv = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                idx, tidx = [], []
                for p in parts[1:]:
                    fields = p.split("/")
                    idx.append(_obj_index(fields[0], len(verts)))
                    tidx.append(_obj_index(fields[1], len(uvs)) if len(fields) > 1 and fields[1] else -1)
                for k in range(1, len(idx) - 1):   # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
                    face_uv.append([tidx[0], tidx[k], tidx[k + 1]])
    V = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not uvs:
        return V, T, None
    UV = np.asarray(uvs, dtype=np.float64)
    FT = np.asarray(face_uv, dtype=np.int64).reshape(-1, 3)
    if FT.size == 0 or np.all(FT < 0):
        if len(UV) != len(V):
            raise TemplateError("missing_uv", f"{len(UV)} vt records for {len(V)} vertices")
        return V, T, UV
    if np.any(FT < 0):
        raise TemplateError("missing_uv", "some face corners lack a vt index")
    per_vertex = np.full((len(V), 2), np.nan)
    for vi, ti in zip(T.ravel(), FT.ravel()):
        if 0 <= vi < len(V):
            if not np.isnan(per_vertex[vi, 0]) and np.any(per_vertex[vi] != UV[ti]):
                raise TemplateError("uv_seam", f"vertex {vi} has more than one UV")
            per_vertex[vi] = UV[ti]
    if np.any(np.isnan(per_vertex)):
        raise TemplateError("missing_uv", "some vertices are not referenced by any face")
    return V, T, per_vertex


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def write_obj(path, vertices, triangles, uv=None, comment: str | None = None) -> None:
    vertices = np.asarray(vertices)
    lines = [f"# {comment}"] if comment else []
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    if uv is not None:
        lines += [f"vt {u:.7f} {v:.7f}" for u, v in np.asarray(uv)]
        lines += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in triangles]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------- template directory

def load_template(path) -> TemplateMesh:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"template directory not found: {root}")
    V, T, UV = read_obj(root / "template.obj")
    if UV is None:
        raise TemplateError("missing_uv", "template.obj has no vt records")
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    D = read_tensor(root / "downsample.mat").astype(np.float64)
    J = read_tensor(root / "regressor.mat").astype(np.float64)
    if D.shape[0] != meta.get("N", D.shape[0]) or J.shape[0] != meta.get("J", J.shape[0]):
        raise TemplateError("shape", "meta.json N/J disagree with the stored operators")
    ct = meta.get("coarse_faces")
    parts = meta.get("parts")
    if np.any(UV < 0.0) or np.any(UV > 1.0):
        raise TemplateError("uv_range", "uv out of range [0, 1]")
    t = TemplateMesh(
        vertices_full=V, triangles=T, uv=UV, downsample_map=D, joint_regressor=J,
        coarse_triangles=None if ct is None else np.asarray(ct, dtype=np.int64).reshape(-1, 3),
        parts=None if parts is None else np.asarray(parts, dtype=np.int64),
        joint_names=tuple(meta.get("joint_names", ())), units=meta.get("units", "m"),
    )
    t.validate()
    return t


def save_template(template: TemplateMesh, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_obj(root / "template.obj", template.vertices_full, template.triangles, template.uv)
    write_tensor(root / "downsample.mat", template.downsample_map.astype(np.float32))
    write_tensor(root / "regressor.mat", template.joint_regressor.astype(np.float32))
    meta = {"N": template.n_coarse, "J": template.n_joints, "units": template.units,
            "full_vertices": template.n_full, "joint_names": list(template.joint_names)}
    if template.coarse_triangles is not None:
        meta["coarse_faces"] = template.coarse_triangles.tolist()
    if template.parts is not None:
        meta["parts"] = template.parts.tolist()
    (root / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def mean_edge_length(vertices: np.ndarray, triangles: np.ndarray) -> float:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    return float(np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1).mean())


def uniform_laplacian(n: int, triangles: np.ndarray) -> np.ndarray:
    """Dense uniform graph Laplacian ``I - A / deg`` (small meshes only)."""
    A = np.zeros((n, n))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        A[triangles[:, a], triangles[:, b]] = 1.0
        A[triangles[:, b], triangles[:, a]] = 1.0
    deg = A.sum(axis=1)
    deg[deg == 0] = 1.0
    return np.eye(n) - A / deg[:, None]
