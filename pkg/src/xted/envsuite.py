"""Point-mass benchmark with configurable gravity, drag and mass.

State is (x, y, vx, vy), action is a 2-D force. Domains differ only by
multipliers on the nominal physical constants, so the dynamics gap between
two domains is known exactly and can be measured with
:func:`dynamics_residual`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, SimulationError
from .training import Trajectory

G_NOMINAL = 9.8
DRAG_NOMINAL = 0.5
MASS_NOMINAL = 1.0
KP, KD = 4.0, 2.0
STATE_DIM, ACTION_DIM = 4, 2


@dataclass(frozen=True)
class EnvConfig:
    gravity_mult: float = 1.0
    friction_mult: float = 1.0
    mass_mult: float = 1.0
    dt: float = 0.05
    action_limit: float = 30.0
    goal: tuple = (0.0, 0.0)
    episode_length: int = 100
    init_low: float = -2.0
    init_high: float = 2.0
    name: str = "nominal"

    def __post_init__(self):
        for f in ("gravity_mult", "friction_mult", "mass_mult", "dt", "action_limit"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be > 0")
        if self.episode_length < 2:
            raise ConfigError("episode_length must be >= 2")
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        if len(self.goal) != 2:
            raise ConfigError("goal must be a 2-D point")
        if not self.init_low < self.init_high:
            raise ConfigError("init_low must be below init_high")

    @property
    def g(self):
        return G_NOMINAL * self.gravity_mult

    @property
    def drag(self):
        return DRAG_NOMINAL * self.friction_mult

    @property
    def mass(self):
        return MASS_NOMINAL * self.mass_mult

    def to_dict(self):
        d = asdict(self)
        d["goal"] = list(self.goal)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


def clip_action(a, limit):
    a = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return a * scale


def step(s, a, env):
    """Semi-implicit Euler step. Works on single states or batches (..., 4).

    Returns ``(next_state, reward)`` with reward = -|position - goal|.
    """
    s = np.asarray(s, dtype=np.float64)
    a = clip_action(a, env.action_limit)
    p, v = s[..., :2], s[..., 2:]
    grav = np.array([0.0, env.g])
    v_next = v + env.dt * (a / env.mass - env.drag * v / env.mass - grav)
    p_next = p + env.dt * v_next
    s_next = np.concatenate([p_next, v_next], axis=-1)
    if not np.all(np.isfinite(s_next)):
        raise SimulationError("non-finite state in point-mass step")
    r = -np.linalg.norm(p_next - np.asarray(env.goal), axis=-1)
    return s_next, r


def lipschitz_constant(env):
    """Spectral norm of the (unclipped) step map's Jacobian w.r.t. (s, a)."""
    dt, m, c = env.dt, env.mass, env.drag
    kv = 1.0 - dt * c / m
    J = np.zeros((4, 6))
    J[0:2, 0:2] = np.eye(2)
    J[0:2, 2:4] = dt * kv * np.eye(2)
    J[0:2, 4:6] = dt * dt / m * np.eye(2)
    J[2:4, 2:4] = kv * np.eye(2)
    J[2:4, 4:6] = dt / m * np.eye(2)
    return float(np.linalg.norm(J, 2))


def scripted_policy(s, env_tuned, noise_std=0.0, rng=None):
    """PD controller toward the goal with gravity feed-forward for ``env_tuned``."""
    s = np.asarray(s, dtype=np.float64)
    p, v = s[..., :2], s[..., 2:]
    a = KP * (np.asarray(env_tuned.goal) - p) - KD * v
    a = a + np.array([0.0, env_tuned.mass * env_tuned.g])
    if noise_std > 0:
        if rng is None:
            raise ValueError("exploration noise needs an rng")
        a = a + rng.normal(0.0, noise_std, size=a.shape)
    return clip_action(a, env_tuned.action_limit)


def initial_states(env, n, rng):
    s = np.zeros((n, STATE_DIM))
    s[:, :2] = rng.uniform(env.init_low, env.init_high, size=(n, 2))
    return s


def rollout(env, policy, n_episodes, seed, record=False):
    """Run ``n_episodes`` in lockstep from seeded initial positions.

    ``policy(states, t)`` maps (n, 4) states to (n, 2) actions. Returns
    per-episode returns, and when ``record`` also (states, actions, rewards)
    arrays shaped (n, T, .).
    """
    rng = np.random.default_rng(seed)
    s = initial_states(env, n_episodes, rng)
    T = env.episode_length
    S = np.zeros((n_episodes, T, STATE_DIM))
    A = np.zeros((n_episodes, T, ACTION_DIM))
    R = np.zeros((n_episodes, T))
    for t in range(T):
        a = clip_action(policy(s, t), env.action_limit)
        s_next, r = step(s, a, env)
        S[:, t], A[:, t], R[:, t] = s, a, r
        s = s_next
    returns = R.sum(axis=1)
    if record:
        return returns, (S, A, R)
    return returns


def collect(env, n_episodes, seed, policy_env=None, noise_std=0.3, domain=None):
    """Roll out the noisy scripted policy and return a list of Trajectory.

    The controller is tuned for ``policy_env`` (defaults to ``env`` itself,
    i.e. a policy that is competent in its own domain).
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    tuned = policy_env or env
    noise_rng = np.random.default_rng([seed, 1])

    def policy(s, t):
        return scripted_policy(s, tuned, noise_std, noise_rng)

    _, (S, A, R) = rollout(env, policy, n_episodes, seed, record=True)
    tag = domain if domain is not None else env.name
    return [Trajectory(S[i], A[i], R[i], tag) for i in range(n_episodes)]


def window_residuals(states, actions, env):
    """Per-step residuals |s_{t+1} - step(s_t, a_t)| for (..., T, 4) arrays."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.shape[-2] < 2:
        raise ValueError("need at least 2 timesteps for a dynamics residual")
    pred, _ = step(states[..., :-1, :], actions[..., :-1, :], env)
    return np.linalg.norm(states[..., 1:, :] - pred, axis=-1)


@dataclass
class ResidualSummary:
    residuals: np.ndarray
    mean: float
    median: float


def dynamics_residual(item, env):
    """Residuals of a Trajectory or an (H, D) window array against ``env``.

    Window columns are [state(4), action(2), reward...]; rewards are ignored.
    """
    if isinstance(item, Trajectory):
        s, a = item.states, item.actions
    else:
        arr = np.asarray(item, dtype=np.float64)
        s, a = arr[..., :STATE_DIM], arr[..., STATE_DIM : STATE_DIM + ACTION_DIM]
    res = window_residuals(s, a, env)
    return ResidualSummary(res, float(res.mean()), float(np.median(res)))


@dataclass
class GapReport:
    gap_name: str
    source_return: float
    target_return: float

    @staticmethod
    def to_csv(reports):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gap_name", "source_return", "target_return"])
        for r in reports:
            w.writerow([r.gap_name, repr(r.source_return), repr(r.target_return)])
        return buf.getvalue()


def evaluate_controller(env_tuned, env_eval, n_episodes, seed):
    """Per-episode returns of the noise-free controller tuned for ``env_tuned``."""
    return rollout(env_eval, lambda s, t: scripted_policy(s, env_tuned), n_episodes, seed)


def quantify_gap(source_env, target_env, n_episodes=20, seed=0, gap_name=None):
    """Source-tuned vs target-tuned controller, both evaluated on the target env."""
    src = evaluate_controller(source_env, target_env, n_episodes, seed)
    tgt = evaluate_controller(target_env, target_env, n_episodes, seed)
    return GapReport(gap_name or source_env.name, float(src.mean()), float(tgt.mean()))


GAPS = {
    "gravity": dict(gravity_mult=2.0),
    "friction": dict(friction_mult=0.5),
    "mass": dict(mass_mult=2.0),
}


def gap_env(gap, base=None, **overrides):
    """Source env for one of the named gaps (gravity x2, friction x0.5, mass x2)."""
    base = base or EnvConfig()
    d = base.to_dict()
    d.update(GAPS[gap])
    d.update(overrides)
    d["name"] = f"{gap}"
    return EnvConfig.from_dict(d)
