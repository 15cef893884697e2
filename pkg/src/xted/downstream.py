"""Behavior cloning and the Target / +Source / +S4RL / +Edited comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import envsuite as E
from . import numerics as nx
from .editing import EditConfig, edit, s4rl_augment
from .errors import ConfigError, DivergenceError, FormatError
from .model import pack_tensors, unpack_tensors
from .numerics import Tensor
from .training import window_dataset

log = logging.getLogger(__name__)

POLICY_MAGIC = b"XTEDPOLI"
POLICY_VERSION = 1
ARMS = ("Tgt", "Tgt+Src", "Tgt+S4RL", "Tgt+EditedSrc")


@dataclass
class BCConfig:
    hidden: int = 64
    lr: float = 1e-4
    steps: int = 4000
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("BC hidden, lr, steps and batch_size must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown bc config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PolicyParams:
    """Three-layer MLP from normalized states to normalized actions."""

    weights: dict
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    action_limit: float
    history: list | None = None

    def forward(self, x):
        w = self.weights
        h = nx.gelu(nx.linear(x, w["w1"], w["b1"]))
        h = nx.gelu(nx.linear(h, w["w2"], w["b2"]))
        return nx.linear(h, w["w3"], w["b3"])

    def act(self, states):
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        x = Tensor._wrap((s - self.state_mean) / self.state_std)
        a = self.forward(x).data * self.action_std + self.action_mean
        return E.clip_action(a, self.action_limit)

    def __call__(self, states, t=None):
        return self.act(states)

    def to_bytes(self):
        arrays = {k: v.data for k, v in self.weights.items()}
        arrays.update(
            state_mean=self.state_mean,
            state_std=self.state_std,
            action_mean=self.action_mean,
            action_std=self.action_std,
            action_limit=np.array([self.action_limit]),
        )
        return POLICY_MAGIC + struct.pack("<I", POLICY_VERSION) + pack_tensors(arrays)

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < 12 or buf[:8] != POLICY_MAGIC:
            raise FormatError("not a policy file (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != POLICY_VERSION:
            raise FormatError(f"policy version {version} but this build reads version {POLICY_VERSION}")
        try:
            arrays, _ = unpack_tensors(buf, 12)
            weights = {k: Tensor(arrays.pop(k)) for k in ("w1", "b1", "w2", "b2", "w3", "b3")}
        except (struct.error, ValueError, KeyError) as exc:
            raise FormatError(f"truncated or corrupt policy file: {exc}") from exc
        return cls(
            weights,
            arrays["state_mean"],
            arrays["state_std"],
            arrays["action_mean"],
            arrays["action_std"],
            float(arrays["action_limit"][0]),
        )


def canonical_pairs(states, actions):
    """Deduplicate and sort (state, action) rows.

    Makes training invariant to dataset order and exact duplication.
    """
    rows = np.concatenate([np.asarray(states).reshape(-1, states.shape[-1]),
                           np.asarray(actions).reshape(-1, actions.shape[-1])], axis=1)
    rows = np.unique(rows, axis=0)
    ds = states.shape[-1]
    return rows[:, :ds], rows[:, ds:]


def _dataset_seed(seed, states, actions):
    digest = hashlib.sha256(np.ascontiguousarray(states).tobytes() + np.ascontiguousarray(actions).tobytes())
    return [seed, int.from_bytes(digest.digest()[:8], "little")]


def bc_train(states, actions, cfg, action_limit=E.EnvConfig().action_limit):
    """Fit a state->action MLP by mean-squared regression with Adam."""
    states, actions = canonical_pairs(np.asarray(states, float), np.asarray(actions, float))
    n = states.shape[0]
    if n == 0:
        raise ConfigError("behavior cloning needs a non-empty dataset")
    s_mean, s_std = states.mean(0), np.maximum(states.std(0), 1e-8)
    a_mean, a_std = actions.mean(0), np.maximum(actions.std(0), 1e-8)
    X = (states - s_mean) / s_std
    Y = (actions - a_mean) / a_std
    rng = np.random.default_rng(_dataset_seed(cfg.seed, states, actions))
    ds, da, h = X.shape[1], Y.shape[1], cfg.hidden
    weights = {
        "w1": Tensor(rng.normal(0, 1 / np.sqrt(ds), (ds, h)), requires_grad=True),
        "b1": Tensor(np.zeros(h), requires_grad=True),
        "w2": Tensor(rng.normal(0, 1 / np.sqrt(h), (h, h)), requires_grad=True),
        "b2": Tensor(np.zeros(h), requires_grad=True),
        "w3": Tensor(rng.normal(0, 1 / np.sqrt(h), (h, da)), requires_grad=True),
        "b3": Tensor(np.zeros(da), requires_grad=True),
    }
    policy = PolicyParams(weights, s_mean, s_std, a_mean, a_std, float(action_limit), [])
    opt = nx.AdamState.for_params(weights, lr=cfg.lr)
    B = min(cfg.batch_size, n)
    order, pos = rng.permutation(n), 0
    epoch_losses = []
    for _ in range(cfg.steps):
        if pos + B > n:
            order, pos = rng.permutation(n), 0
            policy.history.append(float(np.mean(epoch_losses)))
            epoch_losses = []
        idx = order[pos : pos + B]
        pos += B
        with nx.Graph() as g:
            diff = nx.sub(policy.forward(Tensor._wrap(X[idx])), Y[idx])
            loss = nx.mean(nx.mul(diff, diff))
            g.backward(loss)
        if not np.isfinite(loss.data):
            raise DivergenceError("non-finite behavior cloning loss", seed=cfg.seed)
        grads = {k: w.grad for k, w in weights.items()}
        nx.zero_grad(weights.values())
        nx.adam_step(weights, grads, opt)
        epoch_losses.append(float(loss.data))
    if epoch_losses:
        policy.history.append(float(np.mean(epoch_losses)))
    return policy


@dataclass
class EvalResult:
    returns: np.ndarray
    mean: float
    std: float


def evaluate(policy, env, n_episodes=10, seed=0):
    """Deterministic rollouts of ``policy`` (callable states->actions) in ``env``."""
    fn = policy.act if isinstance(policy, PolicyParams) else policy
    rets = E.rollout(env, lambda s, t: fn(s), n_episodes, seed)
    return EvalResult(rets, float(rets.mean()), float(rets.std()))


def delta_pct(value, baseline):
    """Relative change against the target-only baseline, in percent.

    Returns are negative, so the magnitude of the baseline is the
    denominator: a positive delta is always an improvement.
    """
    if baseline == 0:
        return 0.0
    return 100.0 * (value - baseline) / abs(baseline)


@dataclass
class ComparisonConfig:
    bc: BCConfig
    edit: EditConfig
    seeds: tuple = (0, 1, 2, 3, 4)
    n_eval_episodes: int = 10
    s4rl_sigma2: float = 3e-4


@dataclass
class ComparisonRow:
    arm: str
    seed: str
    mean_return: float
    std_return: float
    delta_pct: float


def _pairs(windows_or_trajs):
    if isinstance(windows_or_trajs, np.ndarray):
        arr = windows_or_trajs
        return arr[..., : E.STATE_DIM].reshape(-1, E.STATE_DIM), arr[
            ..., E.STATE_DIM : E.STATE_DIM + E.ACTION_DIM
        ].reshape(-1, E.ACTION_DIM)
    s = np.concatenate([t.states for t in windows_or_trajs])
    a = np.concatenate([t.actions for t in windows_or_trajs])
    return s, a


def arm_datasets(target_trajs, source_trajs, trained, cfg):
    """(states, actions) training sets for every comparison arm."""
    H = trained.params.config.H
    tgt = window_dataset(target_trajs, H).data
    src = window_dataset(source_trajs, H, (trained.normalizer.ret_lo, trained.normalizer.ret_hi)).data
    edited = edit(src, trained, cfg.edit)
    s4rl = s4rl_augment(tgt, E.STATE_DIM, cfg.s4rl_sigma2, seed=cfg.edit.seed)
    both = lambda x, y: tuple(np.concatenate(p) for p in zip(_pairs(x), _pairs(y)))  # noqa: E731
    return {
        "Tgt": _pairs(tgt),
        "Tgt+Src": both(tgt, src),
        "Tgt+S4RL": both(tgt, s4rl),
        "Tgt+EditedSrc": both(tgt, edited),
    }


def comparison_rows(returns):
    """Build report rows from ``{arm: {seed: EvalResult}}``."""
    rows = []
    seeds = sorted(next(iter(returns.values())).keys())
    for arm in returns:
        means = []
        for seed in seeds:
            r = returns[arm][seed]
            base = returns["Tgt"][seed].mean
            rows.append(ComparisonRow(arm, str(seed), r.mean, r.std, delta_pct(r.mean, base)))
            means.append(r.mean)
        base_all = float(np.mean([returns["Tgt"][s].mean for s in seeds]))
        m = float(np.mean(means))
        rows.append(ComparisonRow(arm, "all", m, float(np.std(means)), delta_pct(m, base_all)))
    return rows


def run_comparison(target_trajs, source_trajs, trained, target_env, cfg, datasets=None):
    """Train one BC policy per arm and seed, evaluate on the target env."""
    if not target_trajs or not source_trajs or trained is None:
        raise ConfigError("comparison needs target data, source data and a trained checkpoint")
    datasets = datasets or arm_datasets(target_trajs, source_trajs, trained, cfg)
    results = {arm: {} for arm in ARMS}
    for seed in cfg.seeds:
        bc_cfg = BCConfig(**{**asdict(cfg.bc), "seed": seed})
        for arm in ARMS:
            s, a = datasets[arm]
            policy = bc_train(s, a, bc_cfg, target_env.action_limit)
            results[arm][seed] = evaluate(policy, target_env, cfg.n_eval_episodes, seed=1000 + seed)
            log.info("arm %s seed %d return %.3f", arm, seed, results[arm][seed].mean)
    return comparison_rows(results)


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "mean_return", "std_return", "delta_pct"])
    for r in rows:
        w.writerow([r.arm, r.seed, repr(r.mean_return), repr(r.std_return), repr(r.delta_pct)])
    return buf.getvalue()
