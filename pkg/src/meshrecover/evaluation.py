"""Error metrics, evaluation reports, the input-noise sweep and the direct-fitting baseline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .mae import MAEModel
from .matching import PartialMesh
from .mesh import TemplateMesh, uniform_laplacian
from .training import SampleSet


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def pve(pred, gt) -> float:
    """Mean per-vertex Euclidean distance in millimetres (inputs in metres, no alignment)."""
    pred, gt = _check(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def mpjpe(pred_joints, gt_joints) -> float:
    """Mean per-joint Euclidean distance in millimetres."""
    return pve(pred_joints, gt_joints)


def per_sample_pve(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1) * 1000.0


@dataclass
class EvalReport:
    pve_mm: float
    mpjpe_mm: float
    per_sample: list[dict] = field(default_factory=list)
    config_hash: str = ""
    checkpoint_hash: str = ""
    resolution: str = "full"

    @classmethod
    def from_errors(cls, ids, pves, mpjpes, **kw) -> "EvalReport":
        rows = [{"id": i, "pve_mm": float(p), "mpjpe_mm": float(j)} for i, p, j in zip(ids, pves, mpjpes)]
        agg_p = float(np.mean(pves)) if len(rows) else float("nan")
        agg_j = float(np.mean(mpjpes)) if len(rows) else float("nan")
        return cls(agg_p, agg_j, rows, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def predict(model: MAEModel, data: SampleSet, inputs=None):
    """Coarse predictions, full-resolution predictions and regressed joints for every sample."""
    inputs = data.inputs if inputs is None else inputs
    coarse = model.predict_batch(inputs, data.masks)
    full = np.einsum("fn,snk->sfk", model.params["upsample"].data.astype(np.float64), coarse)
    joints = np.einsum("jn,snk->sjk", model.template.joint_regressor, coarse)
    return coarse, full, joints


def _report(data: SampleSet, coarse, full, joints, resolution, **kw) -> EvalReport:
    if resolution == "full":
        if data.full is None:
            raise ValueError("full-resolution evaluation needs full-resolution targets in the sample set")
        pves = per_sample_pve(full, data.full)
    elif resolution == "coarse":
        pves = per_sample_pve(coarse, data.targets)
    else:
        raise ValueError("resolution must be 'full' or 'coarse'")
    mpjpes = per_sample_pve(joints, data.joints)
    return EvalReport.from_errors(data.ids, pves, mpjpes, resolution=resolution, **kw)


def evaluate(model: MAEModel, data: SampleSet, resolution: str = "full", config_hash: str = "") -> EvalReport:
    data.check(model.template)
    coarse, full, joints = predict(model, data)
    return _report(data, coarse, full, joints, resolution, config_hash=config_hash,
                   checkpoint_hash=model.digest())


def noise_sweep(model: MAEModel, data: SampleSet, stds_mm=(0, 10, 30, 50), seed: int = 0,
                resolution: str = "coarse") -> list[tuple[float, float]]:
    """PVE after adding i.i.d. Gaussian noise of each per-axis std to every visible input.

    One standard-normal draw is shared by all levels and scaled per level, so
    the curve compares noise magnitudes rather than independent draws.
    """
    data.check(model.template)
    if any(s < 0 for s in stds_mm):
        raise ValueError("noise std must be non-negative")
    z = np.random.default_rng(seed).standard_normal(data.inputs.shape)
    visible = data.masks[..., None]
    rows = []
    for std in stds_mm:
        inputs = data.inputs if std == 0 else np.where(visible, data.inputs + z * (std / 1000.0), data.inputs)
        coarse, full, joints = predict(model, data, inputs)
        rows.append((float(std), _report(data, coarse, full, joints, resolution).pve_mm))
    return rows


def baseline_fit(partial: PartialMesh, template: TemplateMesh, iterations: int = 500,
                 lambda_lap: float = 0.1, lr: float = 0.01) -> np.ndarray:
    """Fit free coarse vertices straight to the visible inputs.

    Minimises (1/N) sum_visible |X_i - V_i|_1 + lambda (1/N) |L (X - X_rest)|_F^2
    with Adam from the template rest pose, L the uniform graph Laplacian of
    the coarse mesh; the step size decays to zero along a cosine.
    """
    out = baseline_fit_batch(partial.vertices[None], partial.mask[None], template, iterations, lambda_lap, lr)
    return out[0]


def baseline_fit_batch(vertices, masks, template: TemplateMesh, iterations: int = 500,
                       lambda_lap: float = 0.1, lr: float = 0.01) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n = template.n_coarse
    if vertices.shape[1:] != (n, 3) or masks.shape != vertices.shape[:2]:
        raise ValueError(f"expected (S, {n}, 3) vertices with a matching mask")
    tris = template.coarse_triangles if template.coarse_triangles is not None else template.triangles
    L = uniform_laplacian(n, tris)
    LtL = L.T @ L
    rest = template.coarse_rest
    target = np.where(masks[..., None], vertices, 0.0)
    w = masks[..., None].astype(np.float64)
    x = np.broadcast_to(rest, vertices.shape).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, iterations + 1):
        g = w * np.sign(x - target) / n + (2.0 * lambda_lap / n) * np.einsum("ij,sjk->sik", LtL, x - rest)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * 0.5 * (1.0 + np.cos(np.pi * (t - 1) / max(iterations - 1, 1)))
        x -= step * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def baseline_report(data: SampleSet, template: TemplateMesh, iterations: int = 500,
                    lambda_lap: float = 0.1) -> EvalReport:
    coarse = baseline_fit_batch(data.inputs, data.masks, template, iterations, lambda_lap)
    joints = np.einsum("jn,snk->sjk", template.joint_regressor, coarse)
    return EvalReport.from_errors(data.ids, per_sample_pve(coarse, data.targets),
                                  per_sample_pve(joints, data.joints), resolution="coarse",
                                  checkpoint_hash="baseline")
