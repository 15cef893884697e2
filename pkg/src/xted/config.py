"""Experiment configuration: strict YAML parsing with every default resolved."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import yaml

from .downstream import BCConfig
from .editing import EditConfig, Guidance
from .envsuite import EnvConfig, gap_env
from .errors import ConfigError
from .model import DenoiserConfig
from .training import TrainConfig

SEED_ENV = "XTED_SEED"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "target_env": EnvConfig(name="target").to_dict(),
    "source_env": gap_env("gravity").to_dict() | {"name": "source"},
    "collect": {"n_episodes": 200, "noise_std": 0.3},
    "model": DenoiserConfig(mlp_ratio=2).to_dict(),
    "train": asdict(TrainConfig()),
    "edit": {"kappa": 0.5, "iterations": 1, "anchor_enabled": True, "batch_size": 256, "guidance": None},
    "generate": {"n_windows": 500},
    "s4rl": {"sigma2": 3e-4},
    "bc": asdict(BCConfig()),
    "eval": {"n_episodes": 10, "seeds": [0, 1, 2]},
}

_GUIDANCE_KEYS = {"R_target", "omega"}


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if key == "guidance":
            if value is not None:
                if not isinstance(value, dict) or set(value) - _GUIDANCE_KEYS:
                    raise ConfigError(f"{where} must be null or a mapping with keys {sorted(_GUIDANCE_KEYS)}")
                value = {**asdict(Guidance()), **value}
            out[key] = value
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, given, env=None):
        env = os.environ if env is None else env
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError("config document must be a mapping")
        resolved = _merge(DEFAULTS, given)
        if env.get(SEED_ENV):
            try:
                resolved["seed"] = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        cfg = cls(resolved)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, env=None):
        if path is None:
            return cls.from_dict({}, env)
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(doc, env)

    def validate(self):
        self.target_env, self.source_env, self.model_config, self.train_config
        self.edit_config, self.bc_config
        if int(self.raw["collect"]["n_episodes"]) < 1:
            raise ConfigError("collect.n_episodes must be >= 1")

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def target_env(self):
        return EnvConfig.from_dict(self.raw["target_env"])

    @property
    def source_env(self):
        return EnvConfig.from_dict(self.raw["source_env"])

    @property
    def model_config(self):
        return DenoiserConfig.from_dict(self.raw["model"])

    @property
    def train_config(self):
        return TrainConfig.from_dict({**self.raw["train"], "seed": self.seed})

    @property
    def edit_config(self):
        e = dict(self.raw["edit"])
        g = e.pop("guidance")
        return EditConfig(guidance=Guidance(**g) if g else None, seed=self.seed, **e)

    @property
    def bc_config(self):
        return BCConfig.from_dict({**self.raw["bc"], "seed": self.seed})

    def env_for(self, domain):
        if domain == "target":
            return self.target_env
        if domain == "source":
            return self.source_env
        raise ConfigError(f"unknown domain {domain!r}; expected 'source' or 'target'")

    def to_json(self):
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()
