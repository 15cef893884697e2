"""Tiny configurations shared by the unit tests."""

from xted import envsuite as E
from xted.model import DenoiserConfig
from xted.training import TrainConfig, train

TINY_MODEL = DenoiserConfig(H=10, embed_multiplier=4, cond_dim=16, mlp_ratio=1, n_s=1, n_a=1, n_r=1)
TINY_TRAIN = TrainConfig(lr=1e-3, batch_size=32, epochs=3, K=20, seed=0)


def tiny_data(n=20, seed=0, env=None):
    return E.collect(env or E.EnvConfig(), n, seed, domain="target")


def tiny_model(**train_overrides):
    cfg = TrainConfig(**{**TINY_TRAIN.__dict__, **train_overrides})
    return train(tiny_data(), TINY_MODEL, cfg)
