import pytest

from xted.config import DEFAULTS, ExperimentConfig
from xted.errors import ConfigError


def test_defaults_resolve():
    cfg = ExperimentConfig.from_dict({}, env={})
    assert cfg.raw == DEFAULTS
    assert cfg.source_env.gravity_mult == 2.0 and cfg.target_env.gravity_mult == 1.0
    assert cfg.model_config.H == 20 and cfg.edit_config.kappa == 0.5
    assert cfg.edit_config.guidance is None


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="train.momentum"):
        ExperimentConfig.from_dict({"train": {"momentum": 0.9}}, env={})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"colour": 1}, env={})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"edit": {"guidance": {"omega": 1, "x": 2}}}, env={})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"edit": {"kappa": 2.0}}, env={})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"source_env": {"gravity_mult": -1}}, env={})


def test_guidance_partial_mapping():
    cfg = ExperimentConfig.from_dict({"edit": {"guidance": {"omega": 2.0}}}, env={})
    assert cfg.edit_config.guidance.omega == 2.0 and cfg.edit_config.guidance.R_target == 0.9


def test_seed_override():
    cfg = ExperimentConfig.from_dict({"seed": 3}, env={"XTED_SEED": "11"})
    assert cfg.seed == 11 and cfg.train_config.seed == 11 and cfg.bc_config.seed == 11
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({}, env={"XTED_SEED": "abc"})


def test_yaml_load(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\ncollect:\n  n_episodes: 7\n")
    cfg = ExperimentConfig.load(str(p), env={})
    assert cfg.seed == 4 and cfg.raw["collect"]["n_episodes"] == 7
    p.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(p), env={})


def test_digest_stable():
    a = ExperimentConfig.from_dict({"seed": 1}, env={})
    b = ExperimentConfig.from_dict({"seed": 1}, env={})
    assert a.digest() == b.digest() != ExperimentConfig.from_dict({}, env={}).digest()


def test_unknown_domain():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({}, env={}).env_for("mars")
