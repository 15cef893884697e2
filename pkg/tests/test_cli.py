import csv
import json
import subprocess
import sys
import time

import pytest

from xted import containers as C
from xted import downstream as D
from xted.cli import main

TINY_YAML = """\
seed: 0
collect: {n_episodes: 20}
model: {H: 10, embed_multiplier: 4, cond_dim: 16, mlp_ratio: 1, n_s: 1, n_a: 1, n_r: 1}
train: {K: 20, epochs: 5, batch_size: 32, lr: 0.001}
edit: {kappa: 0.5}
generate: {n_windows: 10}
bc: {hidden: 32, steps: 200, batch_size: 128, lr: 0.001}
eval: {n_episodes: 3, seeds: [0, 1]}
"""


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.delenv("XTED_SEED", raising=False)
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return str(p)


def run(cfg, *args):
    return main(["--config", cfg, *map(str, args)])


def test_collect_prints_and_writes(cfg, tmp_path, capsys):
    out = tmp_path / "t.xted"
    assert run(cfg, "collect", "--domain", "target", "--out", out) == 0
    assert "2000 transitions" in capsys.readouterr().out
    trajs, records = C.read_dataset(out)
    assert len(trajs) == 20 and records[0]["domain"] == "target" and "created" in records[0]
    manifest = json.loads((tmp_path / "t.xted.manifest.json").read_text())
    assert manifest["config"]["collect"]["n_episodes"] == 20
    assert manifest["output_sha256"]


def test_default_collect_budget(tmp_path, monkeypatch):
    monkeypatch.delenv("XTED_SEED", raising=False)
    out = tmp_path / "t.xted"
    assert main(["collect", "--domain", "target", "--out", str(out)]) == 0
    assert sum(len(t) for t in C.read_dataset(out)[0]) == 20_000


def test_collect_idempotent_payload(cfg, tmp_path):
    a, b = tmp_path / "a.xted", tmp_path / "b.xted"
    run(cfg, "collect", "--domain", "source", "--out", a)
    time.sleep(0.01)
    run(cfg, "collect", "--domain", "source", "--out", b)
    assert C.payload_bytes(a) == C.payload_bytes(b)


def test_exit_codes(cfg, tmp_path, capsys):
    assert run(cfg, "collect", "--domain", "mars", "--out", tmp_path / "x") == 2
    assert "usage" in capsys.readouterr().err
    assert run(cfg, "train", "--data", tmp_path / "missing.xted", "--out", tmp_path / "c") == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["--config", str(bad), "gap", "--out", str(tmp_path / "g.csv")]) == 2
    junk = tmp_path / "junk.xted"
    junk.write_bytes(b"not a dataset")
    assert run(cfg, "s4rl", "--data", junk, "--out", tmp_path / "o") == 3
    assert main(["--config", str(tmp_path / "nope.yaml"), "gap", "--out", str(tmp_path / "g.csv")]) == 3


def test_divergence_exit_code(cfg, tmp_path, monkeypatch):
    from xted import numerics as nx
    from xted.errors import DivergenceError

    run(cfg, "collect", "--domain", "target", "--out", tmp_path / "t.xted")

    def boom(*a, **k):
        raise DivergenceError("non-finite gradient", seed=0)

    monkeypatch.setattr(nx, "adam_step", boom)
    assert run(cfg, "train", "--data", tmp_path / "t.xted", "--out", tmp_path / "c.bin") == 4


def test_seed_env_override(cfg, tmp_path, monkeypatch):
    run(cfg, "collect", "--domain", "target", "--out", tmp_path / "a.xted")
    monkeypatch.setenv("XTED_SEED", "5")
    run(cfg, "collect", "--domain", "target", "--out", tmp_path / "b.xted")
    assert C.payload_bytes(tmp_path / "a.xted") != C.payload_bytes(tmp_path / "b.xted")
    m = json.loads((tmp_path / "b.xted.manifest.json").read_text())
    assert m["config"]["seed"] == 5


def test_edit_kappa_zero_payload_identical(cfg, tmp_path):
    tgt, src, ck = tmp_path / "t.xted", tmp_path / "s.xted", tmp_path / "c.bin"
    run(cfg, "collect", "--domain", "target", "--out", tgt)
    run(cfg, "collect", "--domain", "source", "--out", src)
    assert run(cfg, "train", "--data", tgt, "--out", ck) == 0
    k0 = tmp_path / "k0.yaml"
    k0.write_text(TINY_YAML.replace("kappa: 0.5", "kappa: 0.0"))
    out = tmp_path / "e.xted"
    assert main(["--config", str(k0), "edit", "--data", str(src), "--ckpt", str(ck), "--out", str(out)]) == 0
    assert C.payload_bytes(out) == C.payload_bytes(src)
    rec = C.read_dataset(out)[1][0]
    assert rec["edit"]["kappa"] == 0.0 and rec["checkpoint_sha256"]
    m = json.loads((tmp_path / "e.xted.manifest.json").read_text())
    assert m["checkpoint_sha256"] == rec["checkpoint_sha256"] and "s.xted" in m["inputs"]


def test_report_mixed_provenance(cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path, arm in ((a, "Tgt"), (b, "Tgt+Src")):
        path.write_text(f"arm,seed,mean_return,std_return\n{arm},0,-50.0,1.0\n")
    (tmp_path / "a.csv.manifest.json").write_text(json.dumps({"config_sha256": "x"}))
    (tmp_path / "b.csv.manifest.json").write_text(json.dumps({"config_sha256": "y"}))
    out = tmp_path / "r.csv"
    assert run(cfg, "report", "--inputs", a, b, "--out", out) == 2
    assert run(cfg, "report", "--inputs", a, b, "--out", out, "--force") == 0
    assert (tmp_path / "r_long.csv").exists()


def test_cli_smoke_pipeline(cfg, tmp_path, capsys):
    """Full tiny-budget pipeline end to end; must finish well under two minutes."""
    t0 = time.perf_counter()
    p = {n: tmp_path / n for n in ("t.xted", "s.xted", "c.bin", "e.xted", "g.xted", "a.xted",
                                   "pt.bin", "pe.bin", "et.csv", "ee.csv", "report.csv")}
    assert run(cfg, "collect", "--domain", "target", "--out", p["t.xted"]) == 0
    assert run(cfg, "collect", "--domain", "source", "--out", p["s.xted"]) == 0
    assert run(cfg, "train", "--data", p["t.xted"], "--out", p["c.bin"]) == 0
    assert run(cfg, "edit", "--data", p["s.xted"], "--ckpt", p["c.bin"], "--out", p["e.xted"]) == 0
    assert run(cfg, "generate", "--ckpt", p["c.bin"], "--out", p["g.xted"]) == 0
    assert run(cfg, "s4rl", "--data", p["t.xted"], "--out", p["a.xted"]) == 0
    assert run(cfg, "bc", "--data", p["t.xted"], "--out", p["pt.bin"]) == 0
    assert run(cfg, "bc", "--data", p["t.xted"], p["e.xted"], "--out", p["pe.bin"]) == 0
    assert run(cfg, "eval", "--policy", p["pt.bin"], "--arm", "Tgt", "--out", p["et.csv"]) == 0
    assert run(cfg, "eval", "--policy", p["pe.bin"], "--arm", "Tgt+EditedSrc", "--out", p["ee.csv"]) == 0
    assert run(cfg, "report", "--inputs", p["et.csv"], p["ee.csv"], "--out", p["report.csv"]) == 0
    assert run(cfg, "gap", "--out", tmp_path / "gap.csv") == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, elapsed

    assert len(C.read_dataset(p["g.xted"])[0]) == 10
    metrics = list(csv.reader(open(str(p["c.bin"]) + ".metrics.csv")))
    assert metrics[0] == ["epoch", "step", "loss", "wall_ms"] and len(metrics) == 6
    rows = list(csv.DictReader(p["report.csv"].open()))
    base = {r["seed"]: float(r["mean_return"]) for r in rows if r["arm"] == "Tgt"}
    for r in rows:
        assert float(r["delta_pct"]) == D.delta_pct(float(r["mean_return"]), base[r["seed"]])
    long_rows = list(csv.DictReader((tmp_path / "report_long.csv").open()))
    assert {r["metric"] for r in long_rows} == {"mean_return", "std_return", "delta_pct"}
    for name in ("c.bin", "e.xted", "pe.bin", "report.csv"):
        assert (tmp_path / f"{name}.manifest.json").exists()

    # identical seeds -> identical checkpoint and report
    ck2, rep2 = tmp_path / "c2.bin", tmp_path / "r2.csv"
    assert run(cfg, "train", "--data", p["t.xted"], "--out", ck2) == 0
    assert ck2.read_bytes() == p["c.bin"].read_bytes()
    assert run(cfg, "report", "--inputs", p["et.csv"], p["ee.csv"], "--out", rep2) == 0
    assert rep2.read_bytes() == p["report.csv"].read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "xted", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "collect" in out.stdout
