"""Command-line entry point: ``python -m ceqrdqn <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .agent import CEQRAgent, MetricsWriter
from .config import ConfigError
from .gradcheck import format_table, run_suite
from .nnet import load_checkpoint, save_checkpoint
from .synthetic import SyntheticConfig, fit_and_evaluate, generate, write_curves

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["run.seeds"] = str(args.seed)
        out["synthetic.seeds"] = str(args.seed)
    if getattr(args, "frames", None) is not None:
        out["run.frames"] = str(args.frames)
    if getattr(args, "env", None) is not None:
        out["env.name"] = args.env
    if getattr(args, "lambda_ep", None) is not None:
        out["agent.lambda_ep"] = repr(args.lambda_ep)
    if getattr(args, "lambda_al", None) is not None:
        out["agent.lambda_al"] = repr(args.lambda_al)
    if getattr(args, "out", None) is not None:
        out["logging.out"] = args.out
    return out


def resolve(args) -> config_mod.RunConfig:
    if args.config:
        return config_mod.load(args.config, _overrides(args))
    return config_mod.parse("", _overrides(args))


def _outdir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _print_table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def _eval_summary(results) -> dict:
    rets = [r.ret for r in results]
    return {
        "episodes": len(results),
        "mean_return": float(np.mean(rets)) if rets else math.nan,
        "goal_rate": float(np.mean([r.reached_goal for r in results])) if results else math.nan,
    }


def cmd_train_rl(args) -> int:
    cfg = resolve(args)
    out = _outdir(cfg)
    (out / "resolved_config.ini").write_text(config_mod.dumps(cfg))
    rows, summary = [], {}
    for seed in cfg.run.seeds:
        t0 = time.perf_counter()
        env = cfg.make_env()
        agent = CEQRAgent(env.spec, cfg.agent, seed=seed)
        with MetricsWriter(out / f"metrics_seed{seed}.csv") as writer:
            records = agent.train(env, cfg.run.frames, writer, env_seed=seed)
        ev = _eval_summary(agent.evaluate(cfg.make_env(), cfg.run.eval_episodes, seed=10_000 + seed))
        save_checkpoint(out / f"checkpoint_seed{seed}.json", agent.net, agent.adam, agent.rng,
                        meta={"seed": seed, "env_steps": agent.env_steps, "opt_steps": agent.opt_steps,
                              "config": config_mod.dumps(cfg)})
        tail = [r.ret for r in records[-100:]]
        summary[str(seed)] = {
            "train_episodes": len(records),
            "train_mean_return_last100": float(np.mean(tail)) if tail else math.nan,
            "eval": ev,
            "seconds": round(time.perf_counter() - t0, 2),
        }
        rows.append((seed, len(records), f"{summary[str(seed)]['train_mean_return_last100']:.3f}",
                     f"{ev['mean_return']:.3f}", f"{ev['goal_rate']:.2f}"))
    _write_json(out / "summary.json", {"env": cfg.env.name, "frames": cfg.run.frames, "seeds": summary})
    _print_table(("seed", "episodes", "train_ret_last100", "eval_return", "eval_goal_rate"), rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    try:
        net, _, _, meta = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    base = config_mod.parse(meta.get("config", ""), _overrides(args))
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    env = base.make_env()
    agent = CEQRAgent(env.spec, base.agent, seed=seed)
    agent.net.copy_from(net)
    ev = _eval_summary(agent.evaluate(env, base.run.eval_episodes, seed=10_000 + seed))
    if args.out:
        _write_json(_outdir(base) / "eval_summary.json", ev)
    _print_table(("episodes", "mean_return", "goal_rate"),
                 [(ev["episodes"], f"{ev['mean_return']:.3f}", f"{ev['goal_rate']:.2f}")])
    return EXIT_OK


def cmd_train_synthetic(args) -> int:
    cfg = resolve(args)
    s = cfg.synthetic
    out = _outdir(cfg)
    (out / "resolved_config.ini").write_text(config_mod.dumps(cfg))
    rows, reports = [], {}
    for seed in s.seeds:
        data = generate(s.n_train, s.n_test, seed, (s.train_low, s.train_high), (s.test_low, s.test_high))
        rep = fit_and_evaluate(data, SyntheticConfig(s.hidden, s.steps, s.batch_size, s.learning_rate,
                                                      seed, cfg.agent.weights))
        write_curves(out / f"synthetic_seed{seed}.csv", rep)
        reports[str(seed)] = rep.summary()
        rows.append((seed, f"{rep.coverage_in:.3f}", f"{rep.coverage_out:.3f}", f"{rep.epistemic_ratio:.2f}"))
    _write_json(out / "synthetic_summary.json", reports)
    _print_table(("seed", "coverage_in", "coverage_out", "epistemic_ood_ratio"), rows)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rows = run_suite(trials=args.trials, composed_trials=args.composed_trials,
                     seed=args.seed or 0, corrupt=args.corrupt)
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "grad_check.json", rows)
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_RUNTIME


def cmd_emit_plots(args) -> int:
    """Turn metrics CSVs under --out into plot-ready running-mean return curves."""
    out = Path(args.out or "runs")
    files = sorted(out.glob("metrics_seed*.csv"))
    if not files:
        raise ConfigError(f"no metrics_seed*.csv files under {out}")
    window = args.window
    dest = out / "returns_curve.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "episode", "step", "return", "running_mean"))
        for path in files:
            seed = path.stem.removeprefix("metrics_seed")
            with open(path) as src:
                rets = []
                for row in csv.DictReader(src):
                    rets.append(float(row["return"]))
                    w.writerow((seed, row["episode"], row["step"], row["return"],
                                repr(float(np.mean(rets[-window:])))))
    print(f"wrote {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ceqrdqn", description="Calibrated evidential quantile DQN")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--out", help="output directory (created if missing)")

    def rl(sp):
        sp.add_argument("--frames", type=int, help="environment steps per seed")
        sp.add_argument("--env", choices=sorted(config_mod.ENV_PARAMS))
        sp.add_argument("--lambda-ep", type=float, dest="lambda_ep")
        sp.add_argument("--lambda-al", type=float, dest="lambda_al")

    sp = sub.add_parser("train-rl", help="train the agent on a grid environment")
    common(sp)
    rl(sp)
    sp.set_defaults(func=cmd_train_rl)

    sp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(sp)
    rl(sp)
    sp.add_argument("--checkpoint", help="checkpoint JSON written by train-rl")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("train-synthetic", help="fit the 1-D evidential regression harness")
    common(sp)
    sp.set_defaults(func=cmd_train_synthetic)

    sp = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--composed-trials", type=int, default=10, dest="composed_trials")
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("emit-plots", help="write running-mean return curves from metrics CSVs")
    sp.add_argument("--out")
    sp.add_argument("--window", type=int, default=50)
    sp.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level runtime guard
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
