"""DDPM noise schedule: forward marginal, forward posterior, reverse step.

Arrays are 1-indexed by diffusion step: index 0 holds the k=0 convention
(alpha_bar[0] = 1), so ``sched.alpha_bar[k]`` reads naturally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_K = 200
BETA_MIN = 1e-4
# Chosen so the default K=200 chain ends near N(0, I): alpha_bar[200] = 0.0147.
# The common 1e-4..0.02 range was tuned for K=1000 and leaves alpha_bar[200]
# at 0.13, i.e. 36% of the signal amplitude still present at the last step.
BETA_MAX = 0.0415


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    beta_min: float
    beta_max: float

    def _check(self, k):
        if not 1 <= k <= self.K:
            raise IndexError(f"diffusion step {k} outside [1, {self.K}]")

    def signal_coef(self, k):
        return float(np.sqrt(self.alpha_bar[k]))

    def noise_coef(self, k):
        return float(np.sqrt(1.0 - self.alpha_bar[k]))


def build_schedule(K=DEFAULT_K, beta_min=BETA_MIN, beta_max=BETA_MAX):
    """Linear beta schedule with the derived alpha / alpha_bar / posterior tables."""
    if int(K) != K or K < 1:
        raise ConfigError(f"K must be a positive integer, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    K = int(K)
    beta = np.zeros(K + 1)
    beta[1:] = np.linspace(beta_min, beta_max, K)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.zeros(K + 1)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, posterior_var):
        arr.setflags(write=False)
    return NoiseSchedule(K, beta, alpha, alpha_bar, posterior_var, beta_min, beta_max)


def forward_sample(x0, k, noise, sched):
    """Draw from q(x_k | x_0) given the standard-normal ``noise``."""
    sched._check(k)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    return np.sqrt(sched.alpha_bar[k]) * x0 + np.sqrt(1.0 - sched.alpha_bar[k]) * noise


def forward_step(x_prev, k, noise, sched):
    """One-step kernel q(x_k | x_{k-1})."""
    sched._check(k)
    return np.sqrt(sched.alpha[k]) * x_prev + np.sqrt(sched.beta[k]) * noise


def posterior_mean(x_k, x0, k, sched):
    """Mean of q(x_{k-1} | x_k, x_0)."""
    sched._check(k)
    ab, ab_prev = sched.alpha_bar[k], sched.alpha_bar[k - 1]
    c0 = np.sqrt(ab_prev) * sched.beta[k] / (1.0 - ab)
    ck = np.sqrt(sched.alpha[k]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(x0) + ck * np.asarray(x_k)


def predict_x0(x_k, eps_hat, k, sched):
    sched._check(k)
    return (x_k - np.sqrt(1.0 - sched.alpha_bar[k]) * eps_hat) / np.sqrt(sched.alpha_bar[k])


def reverse_step(eps_hat, x_k, k, injected_noise, sched):
    """Sample x_{k-1} from the reverse conditional built on a noise estimate.

    The injected noise is ignored at k=1, where the posterior variance is zero.
    """
    sched._check(k)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x_k = np.asarray(x_k, dtype=np.float64)
    if eps_hat.shape != x_k.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != x_k shape {x_k.shape}")
    x0_hat = predict_x0(x_k, eps_hat, k, sched)
    mean = posterior_mean(x_k, x0_hat, k, sched)
    if k == 1:
        return mean
    return mean + np.sqrt(sched.posterior_var[k]) * np.asarray(injected_noise)
