"""Losses, training-pair generation and the optimisation loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .camera import VIS_REL_TOL, CameraPose, Intrinsics, visible_vertices
from .mae import MAEModel
from .matching import PartialMesh
from .mesh import TemplateMesh
from .tensorio import read_archive, write_archive

logger = logging.getLogger(__name__)


class SampleRejected(RuntimeError):
    """The augmented sample ended up with no visible vertex."""


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 1.0
    lambda_3d: float = 1.0
    joint_reduction: str = "mean"   # "sum" is the plain squared Frobenius norm

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_3d < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_v == 0 and self.lambda_3d == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.joint_reduction not in ("sum", "mean"):
            raise ValueError("joint_reduction must be 'sum' or 'mean'")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    warmup_fraction: float = 0.15
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    upsample_aux: bool = True
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")

    @classmethod
    def fine_tune(cls, steps: int, **overrides) -> "TrainConfig":
        return cls(steps=steps, **{"lr": 1e-5, "weight_decay": 1e-6, "warmup_fraction": 0.0, **overrides})


@dataclass(frozen=True)
class AugmentConfig:
    extra_mask_rate: float = 0.6
    noise_variance: float = 0.0005   # m^2, per coordinate
    max_retries: int = 16
    vis_tol: float = VIS_REL_TOL

    def __post_init__(self):
        if not 0.0 <= self.extra_mask_rate <= 1.0:
            raise ValueError("extra_mask_rate must lie in [0, 1]")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")


# -- losses ---------------------------------------------------------------------

def _check_same(pred, target, what):
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ValueError(f"{what} shape mismatch: {tuple(pred.shape)} vs {tuple(np.shape(target))}")


def loss_vertex(pred, target) -> Tensor:
    """Mean over vertices of the per-vertex L1 norm; batched inputs are averaged over samples too."""
    pred = ag._as_tensor(pred)
    _check_same(pred, target, "vertex")
    n = int(np.prod(pred.shape[:-1]))
    return (pred - target).abs().sum() * (1.0 / n)


def loss_joints(pred, target_joints, template: TemplateMesh, reduction: str = "sum") -> Tensor:
    """Squared Frobenius norm of the joint residual; 'mean' divides by the joint count."""
    pred = ag._as_tensor(pred)
    reg = template.joint_regressor.astype(pred.data.dtype)
    if pred.shape[-2] != reg.shape[1]:
        raise ValueError(f"regressor expects {reg.shape[1]} vertices, got {pred.shape[-2]}")
    joints = reg @ pred
    _check_same(joints, target_joints, "joint")
    r = joints - target_joints
    total = (r * r).sum()
    batch = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    if reduction == "mean":
        return total * (1.0 / (batch * reg.shape[0]))
    return total * (1.0 / batch)


def loss_total(pred, target_vertices, target_joints, template: TemplateMesh,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    lv = loss_vertex(pred, target_vertices)
    lj = loss_joints(pred, target_joints, template, weights.joint_reduction)
    return lv * weights.lambda_v + lj * weights.lambda_3d, lv, lj


def backward(model: MAEModel, vertices, mask, target_vertices, target_joints,
             weights: LossWeights = LossWeights()) -> dict[str, np.ndarray]:
    """Gradients of the total loss for every parameter (zeros where unused)."""
    model.zero_grad()
    pred, _, _ = model.forward_batch(vertices, mask)
    total, _, _ = loss_total(pred, target_vertices, target_joints, model.template, weights)
    ag.check_finite(total, "loss")
    total.backward()
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in model.params.items()}


# -- training pairs -------------------------------------------------------------

@dataclass
class TrainingSample:
    input: PartialMesh
    target_vertices: np.ndarray     # (N, 3)
    target_joints: np.ndarray       # (J, 3)
    target_full: np.ndarray | None = None


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample so generation order and parallelism never matter."""
    return np.random.default_rng([seed, index])


def make_sample(template: TemplateMesh, vertices: np.ndarray, pose: CameraPose, intr: Intrinsics,
                config: AugmentConfig, rng: np.random.Generator) -> TrainingSample:
    """Simulate what the depth camera would show of a ground-truth mesh, then augment.

    ``vertices`` may be full resolution or coarse. Visibility is ray cast on
    the coarse mesh's own surface.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    full = None
    if len(vertices) == template.n_full and template.n_full != template.n_coarse:
        full = vertices
        coarse = template.downsample_map @ vertices
    elif len(vertices) == template.n_coarse:
        coarse = vertices
    else:
        raise ValueError(f"mesh has {len(vertices)} vertices; template expects "
                         f"{template.n_full} (full) or {template.n_coarse} (coarse)")
    if not np.all(np.isfinite(coarse)):
        raise ValueError("ground-truth mesh has non-finite coordinates")
    tris = template.coarse_triangles if template.coarse_triangles is not None else template.triangles
    visible = visible_vertices(coarse, tris, pose, intr, config.vis_tol)
    mask = _drop(visible, config, rng)
    noisy = coarse.copy()
    if config.noise_variance > 0:
        noise = rng.normal(0.0, math.sqrt(config.noise_variance), size=coarse.shape)
        noisy[mask] += noise[mask]
    noisy[~mask] = 0.0
    joints = template.joint_regressor @ coarse
    return TrainingSample(PartialMesh(noisy, mask), coarse, joints, full)


def _drop(visible: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if not visible.any():
        raise SampleRejected("no vertex is visible from the camera")
    if config.extra_mask_rate == 0:
        return visible.copy()
    for _ in range(config.max_retries):
        keep = visible & (rng.random(len(visible)) >= config.extra_mask_rate)
        if keep.sum() >= 2:
            return keep
    raise SampleRejected(f"fewer than 2 visible vertices after {config.max_retries} drop attempts")


@dataclass
class SampleSet:
    """Stacked training pairs, stored as one tensor archive plus a JSON manifest."""
    inputs: np.ndarray          # (S, N, 3)
    masks: np.ndarray           # (S, N) bool
    targets: np.ndarray         # (S, N, 3)
    joints: np.ndarray          # (S, J, 3)
    full: np.ndarray | None = None   # (S, F, 3)
    ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        s = len(self.inputs)
        if not (len(self.masks) == len(self.targets) == len(self.joints) == s):
            raise ValueError("sample arrays disagree on the sample count")
        if self.full is not None and len(self.full) != s:
            raise ValueError("full-resolution targets disagree on the sample count")
        if not self.ids:
            self.ids = [f"{i:06d}" for i in range(s)]
        if len(self.ids) != s:
            raise ValueError("one id per sample is required")

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_samples(cls, samples: list[TrainingSample], ids=None, meta=None) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        full = None
        if all(s.target_full is not None for s in samples):
            full = np.stack([s.target_full for s in samples])
        return cls(np.stack([s.input.vertices for s in samples]),
                   np.stack([s.input.mask for s in samples]),
                   np.stack([s.target_vertices for s in samples]),
                   np.stack([s.target_joints for s in samples]), full,
                   list(ids or []), dict(meta or {}))

    def sample(self, i: int) -> TrainingSample:
        return TrainingSample(PartialMesh(self.inputs[i], self.masks[i]), self.targets[i], self.joints[i],
                              None if self.full is None else self.full[i])

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(self.inputs[index], self.masks[index], self.targets[index], self.joints[index],
                         None if self.full is None else self.full[index],
                         [self.ids[i] for i in index], dict(self.meta))

    def check(self, template: TemplateMesh) -> None:
        n, j = template.n_coarse, template.n_joints
        if self.inputs.shape[1:] != (n, 3) or self.targets.shape[1:] != (n, 3):
            raise ValueError(f"samples do not match the template's {n} coarse vertices")
        if self.joints.shape[1:] != (j, 3):
            raise ValueError(f"samples do not match the template's {j} joints")
        if self.full is not None and self.full.shape[1:] != (template.n_full, 3):
            raise ValueError("full-resolution targets do not match the template")
        if not (np.all(np.isfinite(self.targets)) and np.all(np.isfinite(self.joints))):
            raise ValueError("targets must be finite")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"inputs": self.inputs, "masks": self.masks.astype(np.uint8),
               "targets": self.targets, "joints": self.joints}
        if self.full is not None:
            out["full"] = self.full
        return out

    def save(self, directory) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        write_archive(root / "samples.tens", self.arrays())
        digest = hashlib.sha256((root / "samples.tens").read_bytes()).hexdigest()
        manifest = {**self.meta, "count": len(self), "ids": self.ids, "archive_sha256": digest}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "SampleSet":
        root = Path(directory)
        arrays = read_archive(root / "samples.tens")
        manifest_path = root / "manifest.json"
        meta = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
        missing = {"inputs", "masks", "targets", "joints"} - set(arrays)
        if missing:
            raise ValueError(f"sample archive lacks {sorted(missing)}")
        ids = meta.pop("ids", None)
        for k in ("count", "archive_sha256"):
            meta.pop(k, None)
        return cls(arrays["inputs"].astype(np.float64), arrays["masks"].astype(bool),
                   arrays["targets"].astype(np.float64), arrays["joints"].astype(np.float64),
                   arrays["full"].astype(np.float64) if "full" in arrays else None, ids or [], meta)


def generate_samples(template: TemplateMesh, meshes, intr: Intrinsics = Intrinsics(),
                     config: AugmentConfig = AugmentConfig(), seed: int = 0,
                     azimuth_jitter_deg: float = 0.0, distance: float = 2.5,
                     height: float = 0.9, ids=None) -> SampleSet:
    """One training pair per ground-truth mesh; sample i draws from stream (seed, i)."""
    samples, kept, seeds, azimuths = [], [], [], []
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(meshes))]
    for i, verts in enumerate(meshes):
        rng = sample_rng(seed, i)
        az = float(rng.uniform(-azimuth_jitter_deg, azimuth_jitter_deg)) if azimuth_jitter_deg > 0 else 0.0
        pose = CameraPose.frontal(distance, height, az)
        try:
            samples.append(make_sample(template, verts, pose, intr, config, rng))
        except SampleRejected as exc:
            logger.warning("sample %s rejected: %s", ids[i], exc)
            continue
        kept.append(ids[i])
        seeds.append([seed, i])
        azimuths.append(az)
    meta = {"seed": seed, "sample_seeds": seeds, "azimuth_deg": azimuths,
            "augment": asdict(config), "template_hash": template.digest()}
    return SampleSet.from_samples(samples, kept, meta)


# -- optimisation ---------------------------------------------------------------

def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr`` at the end of warmup, then cosine decay reaching 0 at the last step."""
    total = config.steps
    warm = int(round(config.warmup_fraction * total))
    warm = min(warm, total - 1)
    if step < warm:
        return config.lr * (step + 1) / (warm + 1)
    span = total - 1 - warm
    if span <= 0:
        return config.lr
    progress = (step - warm) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decays(name: str) -> bool:
    return name == "embed" or name.endswith(".weight")


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and _decays(k):
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.float64)
        return out


@dataclass
class TrainResult:
    model: MAEModel
    log: list[dict]
    halted: bool = False


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield order[s:s + batch_size]


def train_step(model: MAEModel, data: SampleSet, index: np.ndarray, config: TrainConfig):
    tpl = model.template
    model.zero_grad()
    pred, _, _ = model.forward_batch(data.inputs[index], data.masks[index])
    total, lv, lj = loss_total(pred, data.targets[index], data.joints[index], tpl, config.loss)
    ag.check_finite(total, "loss")
    if config.upsample_aux and data.full is not None:
        up = model.upsample(pred.detach())
        aux = (up - data.full[index]).abs().sum() * (1.0 / (len(index) * tpl.n_full))
        ag.check_finite(aux, "upsample_loss")
        total = total + aux
    total.backward()
    return float(total.data), float(lv.data), float(lj.data)


def train(model: MAEModel, data: SampleSet, config: TrainConfig, out_dir=None,
          log_path=None) -> TrainResult:
    """Run ``config.steps`` AdamW steps; stops early (keeping the last good weights) on non-finite loss."""
    data.check(model.template)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.params, config.betas, config.adam_eps, config.weight_decay)
    batches = _batches(len(data), min(config.batch_size, len(data)), rng)
    log: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(config.steps):
            lr = lr_at(step, config)
            index = next(batches)
            try:
                total, lv, lj = train_step(model, data, index, config)
            except NonFiniteError as exc:
                logger.error("step %d: %s; halting", step, exc)
                if out is not None:
                    model.save(out)
                return TrainResult(model, log, halted=True)
            opt.step(lr)
            row = {"step": step, "lr": lr, "loss_v": lv, "loss_3d": lj, "loss_total": total}
            log.append(row)
            if fh is not None:
                fh.write(json.dumps(row) + "\n")
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                model.save(out / f"step_{step + 1:06d}")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        model.save(out)
    return TrainResult(model, log)


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def with_steps(config: TrainConfig, steps: int) -> TrainConfig:
    return replace(config, steps=steps)
