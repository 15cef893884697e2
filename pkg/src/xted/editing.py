"""Trajectory editing, generation and the S4RL noise baseline.

Editing noises source windows part of the way up the diffusion chain
(``kappa`` of the K steps) and denoises them with the target-trained model.
The first transition of each window is pinned to its original value after
every noising and denoising step.

Each window owns an RNG stream derived from ``(seed, window_index)``, so the
output does not depend on how windows are grouped into model batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import ConfigError
from .schedule import forward_sample, reverse_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Guidance:
    R_target: float = 0.9
    omega: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.R_target <= 1.0:
            raise ConfigError("R_target must lie in [0, 1]")
        if not (np.isfinite(self.omega) and self.omega >= 0):
            raise ConfigError("omega must be finite and >= 0")


@dataclass(frozen=True)
class EditConfig:
    kappa: float = 0.5
    iterations: int = 1
    guidance: Guidance | None = None
    anchor_enabled: bool = True
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def k_steps(self, K):
        return int(np.floor(self.kappa * K + 0.5))


def guided_noise(tau_k, k, R_target, omega, params):
    """Classifier-free guided noise estimate for a (B, H, D) batch at step k."""
    n = tau_k.shape[0]
    eps_null = M.predict_noise_array(tau_k, M.ConditionInput.unconditional(k, n), params)
    if omega == 0:
        return eps_null
    eps_cond = M.predict_noise_array(tau_k, M.ConditionInput.with_return(k, R_target, n), params)
    return eps_null + omega * (eps_cond - eps_null)


def _noise_estimate(x, k, params, guidance, batch_size):
    out = np.empty_like(x)
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size]
        if guidance is None:
            c = M.ConditionInput.unconditional(k, xb.shape[0])
            out[lo : lo + batch_size] = M.predict_noise_array(xb, c, params)
        else:
            out[lo : lo + batch_size] = guided_noise(xb, k, guidance.R_target, guidance.omega, params)
    return out


class _Streams:
    """One generator per window."""

    def __init__(self, seed, n, tag=0):
        self.rngs = [np.random.default_rng([seed, tag, i]) for i in range(n)]

    def normal(self, shape):
        return np.stack([r.standard_normal(shape) for r in self.rngs])


def denoise(x, k_start, trained, anchors, guidance, streams, batch_size):
    """Run reverse steps k_start..1 on normalized windows ``x`` (copied)."""
    x = x.copy()
    sched = trained.sched
    H, D = x.shape[1:]
    for k in range(k_start, 0, -1):
        eps_hat = _noise_estimate(x, k, trained.params, guidance, batch_size)
        z = streams.normal((H, D)) if k > 1 else np.zeros_like(x)
        x = reverse_step(eps_hat, x, k, z, sched)
        if anchors is not None:
            x[:, 0, :] = anchors
    return x


def _check_compat(windows, trained):
    cfg = trained.params.config
    if windows.ndim != 3:
        raise ConfigError(f"expected (N, H, D) windows, got shape {windows.shape}")
    if windows.shape[1] != cfg.H:
        raise ConfigError(f"window horizon {windows.shape[1]} != checkpoint horizon {cfg.H}")
    if windows.shape[2] != cfg.transition_dim:
        raise ConfigError(f"window width {windows.shape[2]} != checkpoint width {cfg.transition_dim}")


def edit(source_windows, trained, cfg):
    """Edit raw (N, H, D) source windows toward the target domain.

    Returns raw (denormalized) windows. ``kappa = 0`` returns an exact copy.
    """
    raw = np.asarray(getattr(source_windows, "data", source_windows), dtype=np.float64)
    _check_compat(raw, trained)
    k_steps = cfg.k_steps(trained.sched.K)
    if k_steps == 0:
        return raw.copy()
    norm = trained.normalizer
    x = norm.normalize(raw)
    anchors = x[:, 0, :].copy() if cfg.anchor_enabled else None
    N, H, D = x.shape
    for it in range(cfg.iterations):
        streams = _Streams(cfg.seed, N, tag=it)
        x = forward_sample(x, k_steps, streams.normal((H, D)), trained.sched)
        if anchors is not None:
            x[:, 0, :] = anchors
        x = denoise(x, k_steps, trained, anchors, cfg.guidance, streams, cfg.batch_size)
        log.info("edit iteration %d/%d done (k=%d)", it + 1, cfg.iterations, k_steps)
    out = norm.denormalize(x)
    if cfg.anchor_enabled:
        out[:, 0, :] = raw[:, 0, :]
    return out


def generate(n_windows, trained, guidance=None, seed=0, anchor_enabled=True, batch_size=256):
    """Sample windows from pure noise with the full K-step reverse chain.

    Anchors are drawn uniformly from the training windows' first transitions.
    """
    sched = trained.sched
    cfg = trained.params.config
    H, D = cfg.H, cfg.transition_dim
    rng = np.random.default_rng([seed, 7919])
    pick = rng.integers(0, trained.anchors.shape[0], size=n_windows)
    raw_anchors = trained.anchors[pick]
    anchors = trained.normalizer.normalize(raw_anchors) if anchor_enabled else None
    streams = _Streams(seed, n_windows)
    x = streams.normal((H, D))
    if anchors is not None:
        x[:, 0, :] = anchors
    x = denoise(x, sched.K, trained, anchors, guidance, streams, batch_size)
    out = trained.normalizer.denormalize(x)
    if anchor_enabled:
        out[:, 0, :] = raw_anchors
    return out


def s4rl_augment(windows, dim_s, sigma2=3e-4, seed=0):
    """Add N(0, sigma2) noise to every state entry; actions and rewards untouched."""
    if sigma2 <= 0:
        raise ConfigError("sigma2 must be > 0")
    raw = np.asarray(getattr(windows, "data", windows), dtype=np.float64)
    out = raw.copy()
    rng = np.random.default_rng(seed)
    out[..., :dim_s] += rng.normal(0.0, np.sqrt(sigma2), size=out[..., :dim_s].shape)
    return out
