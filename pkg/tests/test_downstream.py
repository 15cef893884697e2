import csv
import io

import numpy as np
import pytest
from helpers import tiny_data, tiny_model

from xted import downstream as D
from xted import envsuite as E
from xted.downstream import BCConfig, PolicyParams
from xted.editing import EditConfig
from xted.errors import ConfigError, FormatError

FAST = BCConfig(hidden=32, lr=1e-3, steps=300, batch_size=128, seed=0)


def linear_data(n, seed):
    r = np.random.default_rng(seed)
    W = np.array([[1.0, -0.5], [0.3, 2.0], [-1.0, 0.2], [0.5, 0.5]])
    s = r.uniform(-2, 2, (n, 4))
    return s, s @ W


def test_fits_linear_policy():
    s, a = linear_data(2000, 0)
    pol = D.bc_train(s, a, BCConfig(hidden=64, lr=1e-3, steps=4000, batch_size=256))
    hs, ha = linear_data(500, 1)
    assert np.mean((pol.act(hs) - ha) ** 2) < 1e-3


def test_duplication_and_order_invariance():
    s, a = linear_data(300, 2)
    p1 = D.bc_train(s, a, FAST)
    p2 = D.bc_train(np.concatenate([s, s]), np.concatenate([a, a]), FAST)
    perm = np.random.default_rng(0).permutation(300)
    p3 = D.bc_train(s[perm], a[perm], FAST)
    for k in p1.weights:
        assert np.array_equal(p1.weights[k].data, p2.weights[k].data)
        assert np.array_equal(p1.weights[k].data, p3.weights[k].data)


def test_epoch_loss_non_increasing():
    s, a = linear_data(256, 3)
    a = np.tanh(a)
    pol = D.bc_train(s, a, BCConfig(hidden=32, lr=1e-4, steps=51, batch_size=256))
    hist = pol.history
    assert len(hist) >= 50
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_policy_output_clipped():
    s, a = linear_data(200, 4)
    pol = D.bc_train(s, a * 100, FAST, action_limit=5.0)
    assert np.all(np.linalg.norm(pol.act(s * 10), axis=-1) <= 5.0 + 1e-12)


def test_empty_dataset():
    with pytest.raises(ConfigError):
        D.bc_train(np.zeros((0, 4)), np.zeros((0, 2)), FAST)


def test_policy_bytes_round_trip():
    s, a = linear_data(100, 5)
    pol = D.bc_train(s, a, FAST)
    buf = pol.to_bytes()
    back = PolicyParams.from_bytes(buf)
    assert back.to_bytes() == buf
    assert np.array_equal(back.act(s), pol.act(s))
    with pytest.raises(FormatError):
        PolicyParams.from_bytes(buf[:30])
    bad = bytearray(buf)
    bad[8] = 7
    with pytest.raises(FormatError, match="7"):
        PolicyParams.from_bytes(bytes(bad))


def test_evaluate_deterministic_and_non_positive():
    env = E.EnvConfig()
    s, a = linear_data(100, 6)
    pol = D.bc_train(s, a, FAST)
    r1, r2 = D.evaluate(pol, env, 5, seed=3), D.evaluate(pol, env, 5, seed=3)
    assert np.array_equal(r1.returns, r2.returns)
    assert np.all(r1.returns <= 0)


def test_delta_pct():
    assert D.delta_pct(-50.0, -50.0) == 0.0
    assert D.delta_pct(-40.0, -50.0) == pytest.approx(20.0)
    assert D.delta_pct(-60.0, -50.0) == pytest.approx(-20.0)
    assert D.delta_pct(12.0, 10.0) == pytest.approx(20.0)


def test_comparison_rows_delta_recomputed():
    res = {arm: {s: D.EvalResult(np.array([]), -50.0 + 3 * i + s, 1.0) for s in (0, 1)}
           for i, arm in enumerate(D.ARMS)}
    rows = D.comparison_rows(res)
    text = D.rows_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == ["arm", "seed", "mean_return", "std_return", "delta_pct"]
    base = {r["seed"]: float(r["mean_return"]) for r in parsed if r["arm"] == "Tgt"}
    for r in parsed:
        assert float(r["delta_pct"]) == D.delta_pct(float(r["mean_return"]), base[r["seed"]])
    assert all(float(r["delta_pct"]) == 0.0 for r in parsed if r["arm"] == "Tgt")


def test_run_comparison_small():
    tm = tiny_model()
    tgt = tiny_data(6, seed=0)
    src = E.collect(E.gap_env("gravity"), 6, seed=1, domain="source")
    cfg = D.ComparisonConfig(bc=FAST, edit=EditConfig(kappa=0.5), seeds=(0, 1), n_eval_episodes=3)
    ds = D.arm_datasets(tgt, src, tm, cfg)
    assert ds["Tgt+Src"][0].shape[0] == ds["Tgt"][0].shape[0] + 600
    rows = D.run_comparison(tgt, src, tm, E.EnvConfig(), cfg, datasets=ds)
    assert len(rows) == 4 * 3
    assert {r.arm for r in rows} == set(D.ARMS)
    with pytest.raises(ConfigError):
        D.run_comparison([], src, tm, E.EnvConfig(), cfg)


def test_dataset_mixing_symmetry():
    tgt = tiny_data(3, seed=0)
    src = E.collect(E.gap_env("gravity"), 3, seed=1)
    s1 = np.concatenate([t.states for t in tgt + src])
    a1 = np.concatenate([t.actions for t in tgt + src])
    s2 = np.concatenate([t.states for t in src + tgt])
    a2 = np.concatenate([t.actions for t in src + tgt])
    p1, p2 = D.bc_train(s1, a1, FAST), D.bc_train(s2, a2, FAST)
    assert p1.to_bytes() == p2.to_bytes()
