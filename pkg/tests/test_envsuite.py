import csv
import io

import numpy as np
import pytest

from xted import envsuite as E
from xted.downstream import evaluate
from xted.errors import ConfigError, SimulationError
from xted.envsuite import EnvConfig


def test_zero_gravity_fixed_point():
    env = EnvConfig(gravity_mult=1e-300)
    s = np.array([0.3, -0.2, 0.0, 0.0])
    s2, _ = E.step(s, np.zeros(2), env)
    np.testing.assert_allclose(s2, s, atol=1e-290)


def test_one_step_gravity_hand_integration():
    env = EnvConfig(friction_mult=1e-300)
    s2, r = E.step(np.zeros(4), np.zeros(2), env)
    assert abs(s2[3] - (-0.49)) < 1e-12
    assert abs(s2[1] - 0.05 * -0.49) < 1e-12
    assert r == -np.linalg.norm(s2[:2])


def test_gravity_term_linear():
    s = np.array([0.0, 0.0, 0.0, 0.0])
    d1 = E.step(s, np.zeros(2), EnvConfig(gravity_mult=1.0))[0][3]
    d2 = E.step(s, np.zeros(2), EnvConfig(gravity_mult=2.0))[0][3]
    assert abs(d2 - 2 * d1) < 1e-15


def test_rewards_non_positive(rng):
    env = EnvConfig()
    _, r = E.step(rng.standard_normal((50, 4)), rng.standard_normal((50, 2)), env)
    assert np.all(r <= 0)


def test_non_finite_state_raises():
    with pytest.raises(SimulationError):
        E.step(np.array([np.inf, 0, 0, 0]), np.zeros(2), EnvConfig())


def test_invalid_env():
    with pytest.raises(ConfigError):
        EnvConfig(gravity_mult=0)
    with pytest.raises(ConfigError):
        EnvConfig.from_dict({"gravity": 2})


def test_action_clipping():
    a = E.clip_action(np.array([300.0, 400.0]), 30.0)
    assert abs(np.linalg.norm(a) - 30.0) < 1e-12
    assert np.array_equal(E.clip_action(np.array([1.0, 2.0]), 30.0), [1.0, 2.0])


def test_energy_dissipation(rng):
    env = EnvConfig(gravity_mult=1e-300)
    s = rng.standard_normal((20, 4)) * 3
    ke = (s[:, 2:] ** 2).sum(-1)
    for _ in range(50):
        s, _ = E.step(s, np.zeros((20, 2)), env)
        ke2 = (s[:, 2:] ** 2).sum(-1)
        assert np.all(ke2 <= ke + 1e-15)
        ke = ke2


def test_lipschitz_bound(rng):
    env = EnvConfig()
    L = E.lipschitz_constant(env)
    ratios = []
    for _ in range(200):
        s, a = rng.standard_normal(4), rng.standard_normal(2)
        ds, da = rng.standard_normal(4) * 1e-3, rng.standard_normal(2) * 1e-3
        out = E.step(s + ds, a + da, env)[0] - E.step(s, a, env)[0]
        ratios.append(np.linalg.norm(out) / np.linalg.norm(np.concatenate([ds, da])))
    assert max(ratios) <= L * 1.10
    assert max(ratios) >= L * 0.90


def test_scripted_policy_at_goal_is_feed_forward():
    env = EnvConfig()
    a = E.scripted_policy(np.zeros(4), env)
    np.testing.assert_array_equal(a, [0.0, env.mass * env.g])


def test_controller_reaches_goal():
    env = EnvConfig()
    _, (S, _, _) = E.rollout(env, lambda s, t: E.scripted_policy(s, env), 100, seed=0, record=True)
    final = np.linalg.norm(S[:, -1, :2], axis=-1)
    assert np.mean(final < 0.2) >= 0.9


def test_collect_budget_and_determinism():
    env = EnvConfig()
    a = E.collect(env, 200, seed=3, domain="target")
    assert sum(len(t) for t in a) == 20_000
    b = E.collect(env, 200, seed=3, domain="target")
    for x, y in zip(a, b):
        assert np.array_equal(x.transitions(), y.transitions())
    assert a[0].domain == "target"
    with pytest.raises(ConfigError):
        E.collect(env, 0, seed=0)


def test_replay_residual_is_zero():
    env = EnvConfig()
    for t in E.collect(env, 5, seed=1):
        assert E.dynamics_residual(t, env).residuals.max() < 1e-12


def test_source_window_residual_lower_bound():
    target = EnvConfig()
    src = E.gap_env("gravity")
    t = E.collect(src, 3, seed=2)[0]
    res = E.dynamics_residual(t, target)
    assert res.mean > 0
    # the velocity mismatch is dt*g before drag coupling; the position update adds dt more of it
    assert res.residuals.min() >= 0.49 * np.hypot(1, 0.05) - 1e-9


def test_residual_ignores_rewards(rng):
    env = EnvConfig()
    w = np.concatenate([rng.standard_normal((20, 6)), np.zeros((20, 1))], axis=1)
    w2 = w.copy()
    w2[:, 6] = rng.standard_normal(20)
    assert np.array_equal(E.dynamics_residual(w, env).residuals, E.dynamics_residual(w2, env).residuals)
    with pytest.raises(ValueError):
        E.dynamics_residual(w[:1], env)


def test_gap_monotone_in_gravity():
    target = EnvConfig()
    meds = []
    for g in (1.0, 1.5, 2.0, 3.0):
        src = EnvConfig(gravity_mult=g)
        per_seed = [np.mean([E.dynamics_residual(t, target).mean for t in E.collect(src, 5, seed)])
                    for seed in range(20)]
        meds.append(np.median(per_seed))
    assert all(b >= a for a, b in zip(meds, meds[1:]))


def test_quantify_gap():
    env = EnvConfig()
    same = E.quantify_gap(env, env, 20, seed=0, gap_name="none")
    assert same.source_return == same.target_return
    rep = E.quantify_gap(E.gap_env("gravity"), env, 20, seed=0)
    assert rep.source_return < rep.target_return
    rows = list(csv.reader(io.StringIO(E.GapReport.to_csv([same, rep]))))
    assert rows[0] == ["gap_name", "source_return", "target_return"]
    assert rows[2][0] == "gravity" and float(rows[2][1]) == rep.source_return


def test_evaluate_matches_quantify_gap():
    env = EnvConfig()
    rep = E.quantify_gap(env, env, 10, seed=4)
    res = evaluate(lambda s: E.scripted_policy(s, env), env, 10, seed=4)
    assert res.mean == rep.target_return


def test_gap_envs():
    assert E.gap_env("gravity").gravity_mult == 2.0
    assert E.gap_env("friction").friction_mult == 0.5
    assert E.gap_env("mass").mass_mult == 2.0
