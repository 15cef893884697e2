"""Windowing, normalization and the diffusion training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from . import numerics as nx
from .errors import ConfigError, DivergenceError
from .schedule import BETA_MAX, BETA_MIN, DEFAULT_K, build_schedule

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    domain: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1, 1)
        n = self.states.shape[0]
        if self.actions.shape[0] != n or (self.rewards is not None and self.rewards.shape[0] != n):
            raise ValueError("states, actions and rewards must have the same length")
        for arr in (self.states, self.actions, self.rewards):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("trajectory contains non-finite values")

    def __len__(self):
        return self.states.shape[0]

    @property
    def episode_return(self):
        return float(self.rewards.sum()) if self.rewards is not None else 0.0

    def transitions(self):
        """Row-wise [s, a, r] array, shape (T, D)."""
        parts = [self.states, self.actions]
        if self.rewards is not None:
            parts.append(self.rewards)
        return np.concatenate(parts, axis=1)


@dataclass
class Window:
    data: np.ndarray
    ret: float
    episode: int
    start: int

    @property
    def anchor(self):
        return self.data[0]


@dataclass
class WindowSet:
    """H-step slices of a dataset, stored as one (N, H, D) array."""

    data: np.ndarray
    returns: np.ndarray
    episode: np.ndarray
    start: np.ndarray
    dim_s: int
    dim_a: int
    has_reward: bool

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i):
        return Window(self.data[i], float(self.returns[i]), int(self.episode[i]), int(self.start[i]))

    @property
    def H(self):
        return self.data.shape[1]

    @property
    def anchors(self):
        return self.data[:, 0, :]

    def with_data(self, data):
        return WindowSet(data, self.returns, self.episode, self.start, self.dim_s, self.dim_a, self.has_reward)

    def states(self):
        return self.data[:, :, : self.dim_s]

    def actions(self):
        return self.data[:, :, self.dim_s : self.dim_s + self.dim_a]


def return_range(trajs):
    rets = [t.episode_return for t in trajs]
    return float(min(rets)), float(max(rets))


def normalize_returns(rets, lo, hi):
    rets = np.asarray(rets, dtype=np.float64)
    if hi - lo <= 0:
        return np.ones_like(rets)
    return np.clip((rets - lo) / (hi - lo), 0.0, 1.0)


def window_dataset(trajs, H, ret_range=None):
    """Non-overlapping H-step windows; trailing remainders are dropped.

    ``ret_range`` is the (min, max) episode return used for min-max
    normalization. Source data should pass the target range.
    """
    if not trajs:
        raise ValueError("no trajectories to window")
    t0 = trajs[0]
    has_reward = t0.rewards is not None
    dim_s, dim_a = t0.states.shape[1], t0.actions.shape[1]
    if ret_range is None:
        ret_range = return_range(trajs) if has_reward else (0.0, 0.0)
    data, rets, eps, starts = [], [], [], []
    for i, tr in enumerate(trajs):
        if (tr.rewards is not None) != has_reward:
            raise ValueError("mixed reward-free and rewarded trajectories")
        n = len(tr) // H
        if n == 0:
            log.warning("trajectory %d has length %d < H=%d; skipped", i, len(tr), H)
            continue
        rows = tr.transitions()
        r = normalize_returns([tr.episode_return], *ret_range)[0] if has_reward else 1.0
        for j in range(n):
            data.append(rows[j * H : (j + 1) * H])
            rets.append(r)
            eps.append(i)
            starts.append(j * H)
    D = dim_s + dim_a + (1 if has_reward else 0)
    return WindowSet(
        np.array(data, dtype=np.float64).reshape(-1, H, D),
        np.array(rets, dtype=np.float64),
        np.array(eps, dtype=np.int64),
        np.array(starts, dtype=np.int64),
        dim_s,
        dim_a,
        has_reward,
    )


def reassemble(trajs, windows, edited):
    """Paste edited (N, H, D) windows back into copies of their episodes."""
    out = []
    ds, da = windows.dim_s, windows.dim_a
    rows = [t.transitions().copy() for t in trajs]
    for w in range(len(windows)):
        e, s = windows.episode[w], windows.start[w]
        rows[e][s : s + windows.H] = edited[w]
    for t, r in zip(trajs, rows):
        rew = r[:, ds + da :] if t.rewards is not None else None
        out.append(Trajectory(r[:, :ds], r[:, ds : ds + da], rew, t.domain))
    return out


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    ret_lo: float = 0.0
    ret_hi: float = 1.0

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean

    def to_arrays(self):
        return {
            "normalizer.mean": self.mean,
            "normalizer.std": self.std,
            "normalizer.ret_range": np.array([self.ret_lo, self.ret_hi]),
        }

    @classmethod
    def from_arrays(cls, arrays):
        lo, hi = arrays["normalizer.ret_range"]
        return cls(arrays["normalizer.mean"], arrays["normalizer.std"], float(lo), float(hi))


def fit_normalizer(windows, ret_range=(0.0, 1.0)):
    """Per-dimension statistics of the (target) windows."""
    if len(windows) == 0:
        raise ValueError("cannot fit a normalizer on an empty window set")
    if len(windows) < 2:
        raise ValueError("need at least 2 windows to fit a normalizer")
    flat = windows.data.reshape(-1, windows.data.shape[-1])
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return Normalizer(flat.mean(axis=0), std, float(ret_range[0]), float(ret_range[1]))


# ---------------------------------------------------------------- loss


@dataclass
class LossSample:
    """Random draws for one batch: diffusion steps, noise, condition dropout."""

    k: np.ndarray
    eps: np.ndarray
    null: np.ndarray


def draw_loss_sample(batch, H, D, K, cfg_dropout, rng):
    k = rng.integers(1, K + 1, size=batch)
    eps = rng.standard_normal((batch, H, D))
    null = rng.random(batch) < cfg_dropout
    return LossSample(k, eps, null)


def noised_input(x0, sample, sched):
    """Forward-noise each window at its own step, keeping timestep 0 clean."""
    ab = sched.alpha_bar[sample.k].reshape(-1, 1, 1)
    tau_k = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * sample.eps
    tau_k[:, 0, :] = x0[:, 0, :]
    return tau_k


def masked_sq_error(pred, eps):
    """Mean over batch and timesteps 1..H-1 of the per-timestep squared error."""
    diff = nx.sub(pred[:, 1:, :], eps[:, 1:, :])
    B, L = diff.shape[0], diff.shape[1]
    return nx.mul(nx.tsum(nx.mul(diff, diff)), 1.0 / (B * L))


def diffusion_loss(x0, returns, params, sched, sample):
    """Noise-prediction loss for a normalized (B, H, D) batch.

    Deterministic given ``sample``; call under a Graph to get gradients.
    """
    tau_k = noised_input(x0, sample, sched)
    cond = M.ConditionInput(k=sample.k, ret=returns, null=sample.null)
    y = M.predict_noise(tau_k, cond, params)
    pred = nx.concat([y[s] for s in params.config.streams], axis=-1)
    return masked_sq_error(pred, sample.eps)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    epochs: int = 50
    max_steps: int = 0
    seed: int = 0
    K: int = DEFAULT_K
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("lr, batch_size and epochs must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainedModel:
    """Everything editing and generation need: weights, schedule, statistics."""

    params: M.DenoiserParams
    normalizer: Normalizer
    sched: object
    anchors: np.ndarray
    anchor_returns: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path):
        extra = dict(self.normalizer.to_arrays())
        extra["anchors"] = self.anchors
        extra["anchor_returns"] = self.anchor_returns
        meta = dict(self.meta)
        meta["schedule"] = {"K": self.sched.K, "beta_min": self.sched.beta_min, "beta_max": self.sched.beta_max}
        M.save_checkpoint(path, self.params, meta, extra)

    @classmethod
    def load(cls, path):
        params, meta, extra = M.load_checkpoint(path)
        s = meta.get("schedule", {})
        sched = build_schedule(s.get("K", DEFAULT_K), s.get("beta_min", BETA_MIN), s.get("beta_max", BETA_MAX))
        return cls(
            params,
            Normalizer.from_arrays(extra),
            sched,
            extra["anchors"],
            extra["anchor_returns"],
            meta,
        )


def _clip_grads(grads, max_norm):
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def train(target_trajs, model_cfg, train_cfg, metrics_path=None, progress=None):
    """Fit the denoiser on target trajectories. Returns a :class:`TrainedModel`."""
    windows = window_dataset(target_trajs, model_cfg.H)
    if windows.data.shape[-1] != model_cfg.transition_dim:
        raise ConfigError(
            f"data has transition width {windows.data.shape[-1]}, model expects {model_cfg.transition_dim}"
        )
    ret_range = return_range(target_trajs) if windows.has_reward else (0.0, 0.0)
    norm = fit_normalizer(windows, ret_range)
    x_all = norm.normalize(windows.data)
    sched = build_schedule(train_cfg.K, train_cfg.beta_min, train_cfg.beta_max)

    rng = np.random.default_rng(train_cfg.seed)
    params = M.init_params(model_cfg, seed=int(rng.integers(2**31)))
    opt = nx.AdamState.for_params(params.tensors, lr=train_cfg.lr)
    N, H, D = x_all.shape
    B = min(train_cfg.batch_size, N)
    history = []
    writer = None
    if metrics_path:
        os.makedirs(os.path.dirname(os.path.abspath(metrics_path)), exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "wall_ms"])
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(N)
            losses = []
            for lo in range(0, N - B + 1, B):
                idx = order[lo : lo + B]
                sample = draw_loss_sample(B, H, D, sched.K, model_cfg.cfg_dropout, rng)
                with nx.Graph() as g:
                    loss = diffusion_loss(x_all[idx], windows.returns[idx], params, sched, sample)
                    if not np.isfinite(loss.data):
                        raise DivergenceError("non-finite diffusion loss", seed=train_cfg.seed)
                    g.backward(loss)
                grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
                nx.zero_grad(params.values())
                try:
                    nx.adam_step(params.tensors, _clip_grads(grads, train_cfg.grad_clip), opt)
                except DivergenceError as exc:
                    raise DivergenceError(str(exc), seed=train_cfg.seed) from exc
                losses.append(float(loss.data))
                step += 1
                if train_cfg.max_steps and step >= train_cfg.max_steps:
                    break
            epoch_loss = float(np.mean(losses)) if losses else float("nan")
            history.append(epoch_loss)
            wall = (time.perf_counter() - t0) * 1000.0
            if writer:
                writer.writerow([epoch, step, f"{epoch_loss:.10g}", f"{wall:.1f}"])
            if progress:
                progress(epoch, step, epoch_loss)
            log.info("epoch %d step %d loss %.5f", epoch, step, epoch_loss)
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                break
    finally:
        if writer:
            fh.close()
    meta = {"train": asdict(train_cfg), "loss_history": history}
    return TrainedModel(params, norm, sched, windows.anchors.copy(), windows.returns.copy(), meta)
