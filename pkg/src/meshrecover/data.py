"""File formats for mesh sequences, frames and partial meshes, plus the bundled toy sets.

A mesh-sequence directory holds ``*.obj`` files (one mesh each) and/or
``*.tens`` tensors shaped (V, 3) or (T, V, 3); entries are taken in
filename order, frames of a stacked tensor in index order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .camera import CameraPose, DepthUVFrame, Intrinsics
from .matching import PartialMesh
from .mesh import TemplateMesh, read_obj, write_obj
from .tensorio import read_any, read_archive, write_archive, write_tensor
from .toy import bundled_template, pose_set
from .training import AugmentConfig, SampleSet, generate_samples


class NoMeshesError(FileNotFoundError):
    pass


def read_mesh_sequence(directory) -> tuple[list[str], list[np.ndarray]]:
    root = Path(directory)
    if not root.is_dir():
        raise NoMeshesError(f"{root}: not a directory")
    ids, meshes = [], []
    for path in sorted(root.iterdir()):
        if path.suffix == ".obj":
            v, _, _ = read_obj(path)
            ids.append(path.stem)
            meshes.append(v)
        elif path.suffix == ".tens":
            arr = read_any(path)
            if isinstance(arr, dict):
                raise ValueError(f"{path}: expected a single tensor, found an archive")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 2 and arr.shape[1] == 3:
                ids.append(path.stem)
                meshes.append(arr)
            elif arr.ndim == 3 and arr.shape[2] == 3:
                for t in range(len(arr)):
                    ids.append(f"{path.stem}_{t:04d}")
                    meshes.append(arr[t])
            else:
                raise ValueError(f"{path}: mesh tensors must be (V, 3) or (T, V, 3), got {arr.shape}")
    if not meshes:
        raise NoMeshesError(f"no meshes in {root}")
    return ids, meshes


def write_mesh_sequence(directory, meshes, triangles=None, fmt: str = "tens") -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(meshes):
        if fmt == "obj":
            write_obj(root / f"{i:06d}.obj", v, triangles if triangles is not None else np.zeros((0, 3), int))
        else:
            write_tensor(root / f"{i:06d}.tens", np.asarray(v, dtype=np.float64))


# -- frames and partial meshes ------------------------------------------------
#
# A frame is a tensor archive holding ``depth`` (H, W) f32, ``uv`` (H, W, 2)
# f32 and optionally ``part_id`` (H, W) u8, plus a JSON sidecar next to it
# (same stem, ``.json``) with the intrinsics and, when known, the camera pose.
# Real sensor depth with externally produced UV maps is ingested the same way.

def frame_sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def save_frame(path, frame: DepthUVFrame) -> None:
    tensors = {"depth": frame.depth.astype(np.float32), "uv": frame.uv.astype(np.float32)}
    if frame.part_id is not None:
        tensors["part_id"] = frame.part_id.astype(np.uint8)
    write_archive(path, tensors)
    meta = {"intrinsics": frame.intrinsics.to_dict()}
    if frame.pose is not None:
        meta["pose"] = frame.pose.to_dict()
    frame_sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def frame_from_tensors(t: dict, meta: dict) -> DepthUVFrame:
    try:
        i = meta["intrinsics"]
        intr = Intrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                          int(i["width"]), int(i["height"]))
        pose = None
        if meta.get("pose") is not None:
            pose = CameraPose(np.array(meta["pose"]["rotation"], dtype=np.float64),
                              np.array(meta["pose"]["translation"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"frame sidecar is missing or malformed: {exc}") from exc
    part = t["part_id"].astype(np.int64) if "part_id" in t else None
    depth = t["depth"].astype(np.float64)
    return DepthUVFrame(depth, t["uv"].astype(np.float64), intr, pose, part, empty=not np.any(depth > 0))


def read_frame_sidecar(path) -> dict:
    side = frame_sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"frame sidecar {side} not found")
    return json.loads(side.read_text(encoding="utf-8"))


def load_frame(path) -> DepthUVFrame:
    return frame_from_tensors(read_archive(path), read_frame_sidecar(path))


def save_partial(path, partial: PartialMesh) -> None:
    write_archive(path, {"vertices": partial.vertices.astype(np.float32), "mask": partial.mask.astype(np.uint8)})


def partial_from_tensors(t: dict) -> PartialMesh:
    if "vertices" not in t or "mask" not in t:
        raise ValueError("partial-mesh archive needs 'vertices' and 'mask' tensors")
    return PartialMesh(t["vertices"].astype(np.float64), t["mask"].astype(bool))


def load_partial(path) -> PartialMesh:
    return partial_from_tensors(read_archive(path))


def is_frame(tensors: dict) -> bool:
    return "depth" in tensors and "uv" in tensors


# -- bundled toy data -----------------------------------------------------------

OVERFIT_POSE_SEED = 1
HELDOUT_POSE_SEED = 2
TRAIN_POSE_SEED = 3
OVERFIT_DIR = Path(__file__).with_name("assets") / "overfit32"
# The overfit set is noise-free: the regression measures memorisation, and
# fresh noise per sample would put a floor under the reachable error.
OVERFIT_AUGMENT = AugmentConfig(noise_variance=0.0)


def toy_samples(count: int, pose_seed: int, sample_seed: int = 0, template: TemplateMesh | None = None,
                config: AugmentConfig = AugmentConfig()) -> SampleSet:
    template = template or bundled_template()
    return generate_samples(template, pose_set(template, count, pose_seed), config=config, seed=sample_seed)


def bundled_samples() -> SampleSet:
    """The 32-sample set used for the overfit regression (regenerated if missing)."""
    if not (OVERFIT_DIR / "samples.tens").exists():
        toy_samples(32, OVERFIT_POSE_SEED, config=OVERFIT_AUGMENT).save(OVERFIT_DIR)
    return SampleSet.load(OVERFIT_DIR)
