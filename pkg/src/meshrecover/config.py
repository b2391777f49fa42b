"""Run configuration: one JSON document with camera, matching, model, training and eval sections."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .camera import Intrinsics, VIS_REL_TOL
from .mae import ModelConfig
from .matching import DEFAULT_EPS
from .training import AugmentConfig, LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "camera": {
        "fx": 200.0, "fy": 200.0, "cx": 127.5, "cy": 127.5, "width": 256, "height": 256,
        "distance": 2.5, "camera_height": 0.9, "azimuth_jitter_deg": 0.0,
        "visibility_tol": VIS_REL_TOL,
    },
    "matching": {"eps": DEFAULT_EPS},
    "model": {"dim": 20, "blocks": 6, "heads": 4, "mlp_ratio": 4, "seed": 0, "dtype": "float32"},
    "training": {
        "steps": 2000, "lr": 1e-3, "weight_decay": 1e-4, "batch_size": 32, "warmup_fraction": 0.15,
        "betas": [0.9, 0.999], "adam_eps": 1e-8, "seed": 0, "checkpoint_every": 0,
        "upsample_aux": True, "fine_tune": False,
        "lambda_v": 1.0, "lambda_3d": 1.0, "joint_reduction": "mean",
        "extra_mask_rate": 0.6, "noise_variance": 0.0005, "max_retries": 16,
    },
    "eval": {"resolution": "full", "noise_stds_mm": [0, 10, 30, 50], "noise_seed": 0,
             "baseline_iterations": 500, "baseline_lambda_lap": 0.1},
}

# Python types each field accepts; ints are fine wherever floats are.
_NUM = (int, float)
_TYPES = {
    "camera": {"fx": _NUM, "fy": _NUM, "cx": _NUM, "cy": _NUM, "width": int, "height": int,
               "distance": _NUM, "camera_height": _NUM, "azimuth_jitter_deg": _NUM, "visibility_tol": _NUM},
    "matching": {"eps": _NUM},
    "model": {"dim": int, "blocks": int, "heads": int, "mlp_ratio": int, "seed": int, "dtype": str},
    "training": {"steps": int, "lr": _NUM, "weight_decay": _NUM, "batch_size": int,
                 "warmup_fraction": _NUM, "betas": list, "adam_eps": _NUM, "seed": int,
                 "checkpoint_every": int, "upsample_aux": bool, "fine_tune": bool,
                 "lambda_v": _NUM, "lambda_3d": _NUM, "joint_reduction": str,
                 "extra_mask_rate": _NUM, "noise_variance": _NUM, "max_retries": int},
    "eval": {"resolution": str, "noise_stds_mm": list, "noise_seed": int,
             "baseline_iterations": int, "baseline_lambda_lap": _NUM},
}


class RunConfig:
    """Validated, fully defaulted configuration. ``raw`` holds the merged JSON."""

    def __init__(self, data: dict | None = None):
        self.raw = merge(data or {})
        try:
            self.intrinsics = Intrinsics(**{k: self.raw["camera"][k] for k in ("fx", "fy", "cx", "cy", "width", "height")})
            self.model = ModelConfig(**self.raw["model"])
            t = dict(self.raw["training"])
            self.loss = LossWeights(t.pop("lambda_v"), t.pop("lambda_3d"), t.pop("joint_reduction"))
            self.augment = AugmentConfig(t.pop("extra_mask_rate"), t.pop("noise_variance"), t.pop("max_retries"),
                                         self.raw["camera"]["visibility_tol"])
            fine = t.pop("fine_tune")
            t["betas"] = tuple(t["betas"])
            if fine:
                steps = t.pop("steps")
                t.pop("lr"), t.pop("weight_decay"), t.pop("warmup_fraction")
                self.training = TrainConfig.fine_tune(steps, loss=self.loss, **t)
            else:
                self.training = TrainConfig(loss=self.loss, **t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cam = self.raw["camera"]
        if cam["distance"] <= 0:
            raise ConfigError("camera.distance must be positive")
        if not 0 <= cam["azimuth_jitter_deg"] <= 180:
            raise ConfigError("camera.azimuth_jitter_deg must lie in [0, 180]")
        if cam["visibility_tol"] < 0:
            raise ConfigError("camera.visibility_tol must be non-negative")
        if self.raw["matching"]["eps"] <= 0:
            raise ConfigError("matching.eps must be positive")
        ev = self.raw["eval"]
        if ev["resolution"] not in ("full", "coarse"):
            raise ConfigError("eval.resolution must be 'full' or 'coarse'")
        if any(not isinstance(s, _NUM) or isinstance(s, bool) or s < 0 for s in ev["noise_stds_mm"]):
            raise ConfigError("eval.noise_stds_mm must be non-negative numbers")
        if ev["baseline_iterations"] < 1:
            raise ConfigError("eval.baseline_iterations must be >= 1")

    @property
    def eps(self) -> float:
        return float(self.raw["matching"]["eps"])

    @property
    def camera(self) -> dict:
        return self.raw["camera"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        return cls(data)


def merge(data: dict) -> dict:
    """Overlay ``data`` on the defaults, rejecting unknown sections/keys and wrong types."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    out = copy.deepcopy(DEFAULTS)
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            want = _TYPES[section][key]
            if isinstance(value, bool) and want is not bool:
                raise ConfigError(f"{section}.{key} must not be a boolean")
            if not isinstance(value, want):
                raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})")
            out[section][key] = copy.deepcopy(value)
    if len(out["training"]["betas"]) != 2:
        raise ConfigError("training.betas needs two values")
    return out
