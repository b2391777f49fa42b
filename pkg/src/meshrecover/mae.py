"""Transformer masked autoencoder that completes partial template meshes."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .matching import PartialMesh
from .mesh import TemplateMesh
from .tensorio import read_archive, write_archive


class DegenerateInputError(ValueError):
    """Too few (or coincident) visible vertices to normalise."""


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray   # (3,)
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateInputError("normalisation scale must be positive")


def _stats(vertices: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched centroid (B, 3) and pooled isotropic std (B,) over visible rows."""
    counts = mask.sum(axis=-1)
    if np.any(counts < 2):
        raise DegenerateInputError("need at least 2 visible vertices")
    w = mask[..., None]
    safe = np.where(w, vertices, 0.0)
    mean = safe.sum(axis=-2) / counts[..., None]
    centred = np.where(w, vertices - mean[..., None, :], 0.0)
    scale = np.sqrt((centred * centred).sum(axis=(-1, -2)) / (3.0 * counts))
    if np.any(~(scale > 0)):
        raise DegenerateInputError("visible vertices have zero variance")
    return mean, scale


def normalize(partial: PartialMesh) -> tuple[PartialMesh, NormStats]:
    mean, scale = _stats(partial.vertices, partial.mask)
    v = np.where(partial.mask[:, None], (partial.vertices - mean) / scale, 0.0)
    return PartialMesh(v, partial.mask.copy()), NormStats(mean, float(scale))


def denormalize(vertices: np.ndarray, stats: NormStats) -> np.ndarray:
    return vertices * stats.scale + stats.mean


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 20
    blocks: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class MAEModel:
    """Parameters live in ``self.params`` (an ordered name -> Tensor mapping)."""

    def __init__(self, template: TemplateMesh, config: ModelConfig = ModelConfig()):
        self.template = template
        self.config = config
        self.n_vertices = template.n_coarse
        dt = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        d, h = config.dim, config.dim * config.mlp_ratio
        shapes: list[tuple[str, tuple, str]] = [
            ("embed", (3, d), "w"), ("mask_token", (d,), "0"), ("pos_embed", (self.n_vertices, d), "w")]
        for b in range(config.blocks):
            p = f"blocks.{b}."
            shapes += [
                (p + "ln1.gamma", (d,), "1"), (p + "ln1.beta", (d,), "0"),
                (p + "attn.q.weight", (d, d), "w"), (p + "attn.q.bias", (d,), "0"),
                (p + "attn.k.weight", (d, d), "w"), (p + "attn.k.bias", (d,), "0"),
                (p + "attn.v.weight", (d, d), "w"), (p + "attn.v.bias", (d,), "0"),
                (p + "attn.proj.weight", (d, d), "w"), (p + "attn.proj.bias", (d,), "0"),
                (p + "ln2.gamma", (d,), "1"), (p + "ln2.beta", (d,), "0"),
                (p + "mlp.fc1.weight", (d, h), "w"), (p + "mlp.fc1.bias", (h,), "0"),
                (p + "mlp.fc2.weight", (h, d), "w"), (p + "mlp.fc2.bias", (d,), "0"),
            ]
        shapes += [("norm.gamma", (d,), "1"), ("norm.beta", (d,), "0"),
                   ("head.weight", (d, 3), "w"), ("head.bias", (3,), "0")]
        self.params: dict[str, Tensor] = {}
        for name, shape, init in shapes:
            if init == "w":
                arr = _trunc_normal(rng, shape)
            elif init == "1":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
        self.params["upsample"] = Tensor(np.array(template.upsample_init, dtype=dt),
                                         requires_grad=True, name="upsample")

    # -- parameter plumbing ------------------------------------------------
    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.data.shape}")
            t.data = np.array(state[k], dtype=self.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- forward ---------------------------------------------------------------
    def encode(self, x_norm: np.ndarray, mask: np.ndarray) -> Tensor:
        """Normalised inputs (B, N, 3) and mask (B, N) -> normalised predictions (B, N, 3)."""
        P = self.params
        cfg = self.config
        x = np.where(mask[..., None], x_norm, 0.0).astype(self.dtype)
        z = ag.where(mask[..., None], x @ P["embed"], P["mask_token"]) + P["pos_embed"]
        ag.check_finite(z, "embedding")
        B, N, d = z.shape
        hd = d // cfg.heads
        for b in range(cfg.blocks):
            p = f"blocks.{b}."
            y = ag.layer_norm(z, P[p + "ln1.gamma"], P[p + "ln1.beta"])
            q = (y @ P[p + "attn.q.weight"] + P[p + "attn.q.bias"]).reshape(B, N, cfg.heads, hd).transpose(0, 2, 1, 3)
            k = (y @ P[p + "attn.k.weight"] + P[p + "attn.k.bias"]).reshape(B, N, cfg.heads, hd).transpose(0, 2, 1, 3)
            v = (y @ P[p + "attn.v.weight"] + P[p + "attn.v.bias"]).reshape(B, N, cfg.heads, hd).transpose(0, 2, 1, 3)
            o = ag.attention(q, k, v).transpose(0, 2, 1, 3).reshape(B, N, d)
            z = z + (o @ P[p + "attn.proj.weight"] + P[p + "attn.proj.bias"])
            y = ag.layer_norm(z, P[p + "ln2.gamma"], P[p + "ln2.beta"])
            y = ag.gelu(y @ P[p + "mlp.fc1.weight"] + P[p + "mlp.fc1.bias"])
            z = z + (y @ P[p + "mlp.fc2.weight"] + P[p + "mlp.fc2.bias"])
            ag.check_finite(z, f"block{b}")
        z = ag.layer_norm(z, P["norm.gamma"], P["norm.beta"])
        out = z @ P["head.weight"] + P["head.bias"]
        return ag.check_finite(out, "head")

    def forward_batch(self, vertices: np.ndarray, mask: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Denormalised coarse prediction (B, N, 3) plus the per-sample stats used."""
        vertices = np.asarray(vertices, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if vertices.shape[-2] != self.n_vertices or mask.shape != vertices.shape[:-1]:
            raise ValueError(f"expected (B, {self.n_vertices}, 3) inputs with matching mask, "
                             f"got {vertices.shape} / {mask.shape}")
        mean, scale = _stats(vertices, mask)
        x = (vertices - mean[:, None, :]) / scale[:, None, None]
        out = self.encode(x, mask)
        return out * scale[:, None, None].astype(self.dtype) + mean[:, None, :].astype(self.dtype), mean, scale

    def upsample(self, coarse):
        return self.params["upsample"] @ coarse

    def forward(self, partial: PartialMesh) -> np.ndarray:
        out, _, _ = self.forward_batch(partial.vertices[None], partial.mask[None])
        return out.data[0].astype(np.float64)

    def forward_full(self, partial: PartialMesh) -> np.ndarray:
        coarse = self.forward(partial)
        return self.params["upsample"].data.astype(np.float64) @ coarse

    def predict_batch(self, vertices, mask, full: bool = False, batch_size: int = 64) -> np.ndarray:
        outs = []
        for s in range(0, len(vertices), batch_size):
            out, _, _ = self.forward_batch(vertices[s:s + batch_size], mask[s:s + batch_size])
            pred = out.data.astype(np.float64)
            if full:
                pred = self.params["upsample"].data.astype(np.float64) @ pred
            outs.append(pred)
        return np.concatenate(outs) if outs else np.zeros((0, self.n_vertices, 3))

    # -- checkpoints -----------------------------------------------------------
    def header(self) -> dict:
        return {"d": self.config.dim, "N": self.n_vertices, "blocks": self.config.blocks,
                "heads": self.config.heads, "mlp_ratio": self.config.mlp_ratio,
                "seed": self.config.seed, "dtype": self.config.dtype,
                "template_hash": self.template.digest(),
                "shapes": {k: list(v.data.shape) for k, v in self.params.items()}}

    def save(self, directory) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        write_archive(root / "params.tens", self.state_dict())
        (root / "header.json").write_text(json.dumps(self.header(), indent=1, sort_keys=True),
                                          encoding="utf-8")

    @classmethod
    def load(cls, directory, template: TemplateMesh) -> "MAEModel":
        root = Path(directory)
        header = json.loads((root / "header.json").read_text(encoding="utf-8"))
        if header["template_hash"] != template.digest():
            raise ValueError("checkpoint was trained against a different template")
        cfg = ModelConfig(dim=header["d"], blocks=header["blocks"], heads=header["heads"],
                          mlp_ratio=header.get("mlp_ratio", 4), seed=header["seed"],
                          dtype=header.get("dtype", "float32"))
        model = cls(template, cfg)
        state = read_archive(root / "params.tens")
        for k, shape in header["shapes"].items():
            if k not in state or list(state[k].shape) != shape:
                raise ValueError(f"checkpoint tensor {k!r} does not match header shape {shape}")
        model.load_state_dict(state)
        return model

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()[:16]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
