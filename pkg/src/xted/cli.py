"""Command-line pipeline: collect -> train -> edit/generate/s4rl -> bc -> eval -> report.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import containers, downstream, editing, envsuite, training
from .config import ExperimentConfig
from .errors import ConfigError, DivergenceError, FormatError
from .fileio import atomic_write_bytes, atomic_write_text, sha256_file
from .training import TrainedModel, window_dataset

log = logging.getLogger("xted")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _manifest_path(out):
    return f"{out}.manifest.json"


def write_manifest(out, cfg, command, inputs=(), checkpoint=None, extra=None):
    """Resolved config, input hashes and checkpoint hash next to ``out``."""
    doc = {
        "command": command,
        "config": cfg.raw,
        "config_sha256": cfg.digest(),
        "inputs": {os.path.basename(p): sha256_file(p) for p in inputs},
        "output": os.path.basename(out),
        "output_sha256": sha256_file(out),
    }
    if checkpoint:
        doc["checkpoint_sha256"] = sha256_file(checkpoint)
    if extra:
        doc.update(extra)
    atomic_write_text(_manifest_path(out), json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


def _provenance(cfg, command, **fields):
    rec = {"command": command, "config_sha256": cfg.digest(), "created": time.time()}
    rec.update(fields)
    return rec


def _load_data(path):
    try:
        return containers.read_dataset(path)
    except FileNotFoundError as exc:
        raise OSError(f"dataset not found: {path}") from exc


def _return_summary(trajs):
    rets = np.array([t.episode_return for t in trajs])
    return f"return mean {rets.mean():.3f} std {rets.std():.3f} min {rets.min():.3f} max {rets.max():.3f}"


# ---------------------------------------------------------------- commands


def cmd_collect(args, cfg):
    env = cfg.env_for(args.domain)
    seed = cfg.seed if args.domain == "target" else cfg.seed + 1
    trajs = envsuite.collect(
        env, int(cfg.raw["collect"]["n_episodes"]), seed,
        noise_std=float(cfg.raw["collect"]["noise_std"]), domain=args.domain,
    )
    rec = _provenance(cfg, "collect", domain=args.domain, env=env.to_dict(), seed=seed)
    containers.write_dataset(args.out, trajs, [rec])
    write_manifest(args.out, cfg, "collect")
    n = sum(len(t) for t in trajs)
    print(f"collected {len(trajs)} episodes, {n} transitions ({args.domain}); {_return_summary(trajs)}")


def cmd_train(args, cfg):
    trajs, _ = _load_data(args.data)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    trained = training.train(trajs, cfg.model_config, cfg.train_config, metrics_path=metrics)
    # payload only: the provenance footer carries timestamps
    trained.meta["data_payload_sha256"] = hashlib.sha256(containers.payload_bytes(args.data)).hexdigest()
    trained.save(args.out)
    write_manifest(args.out, cfg, "train", inputs=[args.data])
    print(f"trained; final epoch loss {trained.meta['loss_history'][-1]:.5f}; checkpoint {args.out}")


def _load_ckpt(path):
    try:
        return TrainedModel.load(path)
    except FileNotFoundError as exc:
        raise OSError(f"checkpoint not found: {path}") from exc


def cmd_edit(args, cfg):
    trajs, _ = _load_data(args.data)
    trained = _load_ckpt(args.ckpt)
    ecfg = cfg.edit_config
    W = window_dataset(trajs, trained.params.config.H, (trained.normalizer.ret_lo, trained.normalizer.ret_hi))
    edited = editing.edit(W.data, trained, ecfg)
    out = training.reassemble(trajs, W, edited)
    rec = _provenance(
        cfg, "edit", checkpoint_sha256=sha256_file(args.ckpt), window=W.H,
        edit={"kappa": ecfg.kappa, "iterations": ecfg.iterations, "anchor_enabled": ecfg.anchor_enabled,
              "seed": ecfg.seed, "guidance": cfg.raw["edit"]["guidance"]},
    )
    containers.write_dataset(args.out, out, [rec])
    write_manifest(args.out, cfg, "edit", inputs=[args.data], checkpoint=args.ckpt)
    print(f"edited {len(W)} windows (kappa={ecfg.kappa}, e={ecfg.iterations}) -> {args.out}")


def cmd_generate(args, cfg):
    trained = _load_ckpt(args.ckpt)
    n = args.n or int(cfg.raw["generate"]["n_windows"])
    g = cfg.raw["edit"]["guidance"]
    windows = editing.generate(n, trained, editing.Guidance(**g) if g else None, seed=cfg.seed)
    c = trained.params.config
    trajs = [
        training.Trajectory(w[:, : c.dim_s], w[:, c.dim_s : c.dim_s + c.dim_a],
                            w[:, c.dim_s + c.dim_a :] if c.reward_enabled else None, "generated")
        for w in windows
    ]
    rec = _provenance(cfg, "generate", checkpoint_sha256=sha256_file(args.ckpt), n_windows=n)
    containers.write_dataset(args.out, trajs, [rec])
    write_manifest(args.out, cfg, "generate", checkpoint=args.ckpt)
    print(f"generated {n} windows -> {args.out}")


def cmd_s4rl(args, cfg):
    trajs, _ = _load_data(args.data)
    sigma2 = float(cfg.raw["s4rl"]["sigma2"])
    out = []
    for i, t in enumerate(trajs):
        rows = editing.s4rl_augment(t.transitions()[None], t.states.shape[1], sigma2, seed=[cfg.seed, i])[0]
        ds, da = t.states.shape[1], t.actions.shape[1]
        out.append(training.Trajectory(rows[:, :ds], rows[:, ds : ds + da],
                                       rows[:, ds + da :] if t.rewards is not None else None, t.domain))
    containers.write_dataset(args.out, out, [_provenance(cfg, "s4rl", sigma2=sigma2)])
    write_manifest(args.out, cfg, "s4rl", inputs=[args.data])
    print(f"s4rl-augmented {len(out)} episodes (sigma2={sigma2}) -> {args.out}")


def cmd_bc(args, cfg):
    states, actions = [], []
    for path in args.data:
        trajs, _ = _load_data(path)
        states += [t.states for t in trajs]
        actions += [t.actions for t in trajs]
    policy = downstream.bc_train(np.concatenate(states), np.concatenate(actions), cfg.bc_config,
                                 cfg.target_env.action_limit)
    atomic_write_bytes(args.out, policy.to_bytes())
    write_manifest(args.out, cfg, "bc", inputs=args.data)
    print(f"bc policy trained on {sum(len(s) for s in states)} transitions -> {args.out}")


def cmd_eval(args, cfg):
    try:
        with open(args.policy, "rb") as fh:
            policy = downstream.PolicyParams.from_bytes(fh.read())
    except FileNotFoundError as exc:
        raise OSError(f"policy not found: {args.policy}") from exc
    env = cfg.env_for(args.domain)
    n = int(cfg.raw["eval"]["n_episodes"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "mean_return", "std_return"])
    for seed in cfg.raw["eval"]["seeds"]:
        r = downstream.evaluate(policy, env, n, seed=1000 + int(seed))
        w.writerow([args.arm, seed, repr(r.mean), repr(r.std)])
    atomic_write_text(args.out, buf.getvalue())
    write_manifest(args.out, cfg, "eval", inputs=[args.policy])
    print(buf.getvalue(), end="")


def read_eval_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_rows(eval_rows):
    """Join per-arm eval rows into comparison rows with deltas vs ``Tgt``."""
    results = {}
    for row in eval_rows:
        r = downstream.EvalResult(np.array([]), float(row["mean_return"]), float(row["std_return"]))
        results.setdefault(row["arm"], {})[int(row["seed"])] = r
    if "Tgt" not in results:
        raise ConfigError("report needs an eval file for the 'Tgt' arm")
    seeds = set(results["Tgt"])
    for arm, by_seed in results.items():
        if set(by_seed) != seeds:
            raise ConfigError(f"arm {arm!r} was evaluated on different seeds than 'Tgt'")
    ordered = {"Tgt": results.pop("Tgt"), **results}
    return downstream.comparison_rows(ordered)


def long_format(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "metric", "value"])
    for r in rows:
        for metric in ("mean_return", "std_return", "delta_pct"):
            w.writerow([r.arm, r.seed, metric, repr(getattr(r, metric))])
    return buf.getvalue()


def cmd_report(args, cfg):
    rows, digests = [], set()
    for path in args.inputs:
        rows += read_eval_csv(path)
        mpath = _manifest_path(path)
        if os.path.exists(mpath):
            with open(mpath) as fh:
                digests.add(json.load(fh).get("config_sha256"))
        else:
            digests.add(None)
    if len(digests) > 1 and not args.force:
        raise ConfigError("eval inputs come from different configurations; pass --force to join them anyway")
    table = report_rows(rows)
    atomic_write_text(args.out, downstream.rows_to_csv(table))
    long_out = args.long_out or os.path.splitext(args.out)[0] + "_long.csv"
    atomic_write_text(long_out, long_format(table))
    write_manifest(args.out, cfg, "report", inputs=args.inputs)
    print(downstream.rows_to_csv(table), end="")


def cmd_gap(args, cfg):
    n = int(cfg.raw["eval"]["n_episodes"])
    rep = envsuite.quantify_gap(cfg.source_env, cfg.target_env, n, seed=cfg.seed, gap_name=args.name)
    atomic_write_text(args.out, envsuite.GapReport.to_csv([rep]))
    write_manifest(args.out, cfg, "gap")
    print(envsuite.GapReport.to_csv([rep]), end="")


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "edit": cmd_edit,
    "generate": cmd_generate,
    "s4rl": cmd_s4rl,
    "bc": cmd_bc,
    "eval": cmd_eval,
    "report": cmd_report,
    "gap": cmd_gap,
}


def build_parser():
    p = _Parser(prog="xted", description="Cross-domain trajectory editing toolkit")
    p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="roll out the scripted policy in one domain")
    c.add_argument("--domain", required=True, choices=["source", "target"])
    c.add_argument("--out", required=True)

    c = sub.add_parser("train", help="train the diffusion model on target data")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")

    c = sub.add_parser("edit", help="edit source data toward the target domain")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)

    c = sub.add_parser("generate", help="sample windows from pure noise")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--n", type=int, default=None)

    c = sub.add_parser("s4rl", help="state-noise augmentation baseline")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)

    c = sub.add_parser("bc", help="behavior cloning on one or more datasets")
    c.add_argument("--data", required=True, nargs="+")
    c.add_argument("--out", required=True)

    c = sub.add_parser("eval", help="evaluate a policy")
    c.add_argument("--policy", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--arm", default="policy")
    c.add_argument("--domain", default="target", choices=["source", "target"])

    c = sub.add_parser("report", help="join eval CSVs into the comparison table")
    c.add_argument("--inputs", required=True, nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--long-out", default=None)
    c.add_argument("--force", action="store_true")

    c = sub.add_parser("gap", help="quantify the source/target dynamics gap")
    c.add_argument("--out", required=True)
    c.add_argument("--name", default=None)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = ExperimentConfig.load(args.config)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"xted: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"xted: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"xted: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"xted: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
