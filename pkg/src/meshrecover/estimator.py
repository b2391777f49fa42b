"""scikit-learn style wrappers around matching and the completion model.

Partial meshes travel as (S, N, 4) arrays: xyz plus a 0/1 visibility flag.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .camera import DepthUVFrame
from .mae import MAEModel, ModelConfig
from .matching import DEFAULT_EPS, PartialMesh, lift_all, match
from .mesh import TemplateMesh
from .training import LossWeights, SampleSet, TrainConfig, train


def check_partial(X, n_vertices: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split an (S, N, 4) partial-mesh array into vertices and boolean mask."""
    if isinstance(X, PartialMesh):
        X = pack_partial([X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != 4:
        raise ValueError(f"expected partial meshes shaped (S, N, 4), got {X.shape}")
    if n_vertices is not None and X.shape[1] != n_vertices:
        raise ValueError(f"expected {n_vertices} vertices per mesh, got {X.shape[1]}")
    flags = X[..., 3]
    if not np.all((flags == 0) | (flags == 1)):
        raise ValueError("visibility column must hold 0 or 1")
    mask = flags == 1
    if not np.all(np.isfinite(X[..., :3][mask])):
        raise ValueError("visible vertices must be finite")
    return np.where(mask[..., None], X[..., :3], 0.0), mask


def pack_partial(partials) -> np.ndarray:
    return np.stack([np.concatenate([p.vertices, p.mask[:, None].astype(np.float64)], axis=1) for p in partials])


def check_targets(y, shape) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(shape):
        raise ValueError(f"targets shaped {y.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y


class PartialMeshTransformer(TransformerMixin, BaseEstimator):
    """Depth+UV frames -> partial meshes over the template's coarse vertices.

    With ``world_frame`` the lifted points are mapped through each frame's
    camera pose, matching the frame the completion model is trained in.
    """

    def __init__(self, template: TemplateMesh | None = None, eps: float = DEFAULT_EPS,
                 accelerated: bool = True, world_frame: bool = True):
        self.template = template
        self.eps = eps
        self.accelerated = accelerated
        self.world_frame = world_frame

    def fit(self, X=None, y=None):
        if self.template is None:
            raise ValueError("a template is required")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        self.n_vertices_ = self.template.n_coarse
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_vertices_")
        frames = [X] if isinstance(X, DepthUVFrame) else list(X)
        return pack_partial([frame_to_partial(f, self.template, self.eps, self.accelerated, self.world_frame)
                             for f in frames])


def frame_to_partial(frame: DepthUVFrame, template: TemplateMesh, eps: float = DEFAULT_EPS,
                     accelerated: bool = True, world_frame: bool = True) -> PartialMesh:
    points = lift_all(frame)
    partial = match(points, template, eps, accelerated)
    if world_frame and frame.pose is not None and partial.n_visible:
        v = partial.vertices.copy()
        v[partial.mask] = frame.pose.to_world(v[partial.mask])
        partial = PartialMesh(v, partial.mask)
    return partial


class MeshCompleter(RegressorMixin, BaseEstimator):
    """Masked-autoencoder completion of partial coarse meshes.

    ``fit(X, y)`` takes (S, N, 4) partial meshes and (S, N, 3) complete coarse
    meshes; joint targets come from the template regressor. A ``SampleSet``
    may be passed as X instead (y is then ignored).
    """

    def __init__(self, template: TemplateMesh | None = None, dim: int = 20, blocks: int = 6, heads: int = 4,
                 mlp_ratio: int = 4, steps: int = 2000, lr: float = 1e-3, weight_decay: float = 1e-4,
                 batch_size: int = 32, warmup_fraction: float = 0.15, lambda_v: float = 1.0,
                 lambda_3d: float = 1.0, upsample_aux: bool = True, random_state: int = 0,
                 dtype: str = "float32"):
        self.template = template
        self.dim = dim
        self.blocks = blocks
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.warmup_fraction = warmup_fraction
        self.lambda_v = lambda_v
        self.lambda_3d = lambda_3d
        self.upsample_aux = upsample_aux
        self.random_state = random_state
        self.dtype = dtype

    def _train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, warmup_fraction=self.warmup_fraction,
                           seed=self.random_state, upsample_aux=self.upsample_aux,
                           loss=LossWeights(self.lambda_v, self.lambda_3d))

    def _as_samples(self, X, y) -> SampleSet:
        if isinstance(X, SampleSet):
            return X
        if y is None:
            raise ValueError("targets are required unless X is a SampleSet")
        verts, mask = check_partial(X, self.template.n_coarse)
        y = check_targets(y, verts.shape)
        joints = np.einsum("jn,snk->sjk", self.template.joint_regressor, y)
        return SampleSet(verts, mask, y, joints)

    def fit(self, X, y=None):
        if self.template is None:
            raise ValueError("a template is required")
        data = self._as_samples(X, y)
        cfg = ModelConfig(self.dim, self.blocks, self.heads, self.mlp_ratio, self.random_state, self.dtype)
        self.model_ = MAEModel(self.template, cfg)
        result = train(self.model_, data, self._train_config())
        self.history_ = result.log
        self.n_vertices_ = self.template.n_coarse
        return self

    def predict(self, X) -> np.ndarray:
        """Completed coarse meshes (S, N, 3)."""
        check_is_fitted(self, "model_")
        verts, mask = check_partial(X, self.n_vertices_)
        return self.model_.predict_batch(verts, mask)

    def predict_full(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        verts, mask = check_partial(X, self.n_vertices_)
        return self.model_.predict_batch(verts, mask, full=True)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean per-vertex error in millimetres (higher is better)."""
        pred = self.predict(X)
        y = check_targets(y, pred.shape)
        err = np.linalg.norm(pred - y, axis=-1).mean(axis=-1) * 1000.0
        return -float(np.average(err, weights=sample_weight))

    @classmethod
    def from_model(cls, model: MAEModel) -> "MeshCompleter":
        c = model.config
        est = cls(model.template, c.dim, c.blocks, c.heads, c.mlp_ratio, random_state=c.seed, dtype=c.dtype)
        est.model_ = model
        est.n_vertices_ = model.n_vertices
        est.history_ = []
        return est
