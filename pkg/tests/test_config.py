import json

import pytest

from meshrecover.config import DEFAULTS, ConfigError, RunConfig


def test_defaults_build():
    cfg = RunConfig()
    assert cfg.model.dim == 20 and cfg.model.blocks == 6
    assert cfg.training.lr == 1e-3 and cfg.training.batch_size == 32
    assert cfg.augment.extra_mask_rate == 0.6 and cfg.augment.noise_variance == 0.0005
    assert cfg.eps == DEFAULTS["matching"]["eps"]
    assert cfg.intrinsics.fx == 200.0 and cfg.intrinsics.width == 256


def test_override_and_digest():
    a = RunConfig({"training": {"steps": 10}})
    assert a.training.steps == 10
    assert a.digest() != RunConfig().digest()
    assert a.digest() == RunConfig({"training": {"steps": 10}}).digest()


@pytest.mark.parametrize("bad", [
    {"nope": {}},
    {"training": {"nope": 1}},
    {"training": {"steps": "10"}},
    {"training": {"steps": True}},
    {"training": {"lr": -1.0}},
    {"training": {"betas": [0.9]}},
    {"model": {"dim": 10, "heads": 3}},
    {"matching": {"eps": 0}},
    {"camera": {"distance": -1}},
    {"eval": {"resolution": "medium"}},
    {"eval": {"noise_stds_mm": [0, -5]}},
    {"training": "fast"},
])
def test_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        RunConfig(bad)


def test_fine_tune_switch():
    cfg = RunConfig({"training": {"fine_tune": True, "steps": 7}})
    assert (cfg.training.lr, cfg.training.weight_decay, cfg.training.warmup_fraction) == (1e-5, 1e-6, 0.0)
    assert cfg.training.steps == 7


def test_load_reports_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{\"training\": ")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)
    p.write_text(json.dumps({"matching": {"eps": 0.02}}))
    assert RunConfig.load(p).eps == 0.02
