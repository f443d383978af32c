"""``tcrl-lab`` command line: train, evaluate, matrix, oracle-check."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .attackers import KINDS
from .cmdp import TabularCmdp
from .config import ExperimentConfig, config_from_dict, load_config
from .critics import value_iteration_worst
from .errors import CheckpointCorruptError, CheckpointVersionError, ConfigError, UnsupportedOperation
from .oracle import OracleConfig, brute_force_worst_cost, horizon_for, truncation_bound
from .policies import TabularSoftmaxPolicy
from .trainer import METHODS

log = logging.getLogger("tcrl_lab")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return config_from_dict({}, getattr(args, "paper_scale", False))
    return load_config(args.config, getattr(args, "paper_scale", False))


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg.trainer.method = args.method
    if args.epochs is not None:
        cfg.trainer.epochs = args.epochs
    seeds = [args.seed] if args.seed is not None else cfg.run.seeds
    for seed in seeds:
        res = experiment.train(
            cfg, seed, train_attacker=args.train_attacker, resume=args.resume,
            log=lambda r: log.info("epoch %d reward %.3f cost %.3f worst %.3f lambda %.3f",
                                   r.epoch, r.mean_reward, r.mean_cost, r.worst_cost,
                                   r.lambda_cost))
        if not args.no_eval:
            reports = experiment.evaluate(cfg, res.agent, res.env, seed)
            rows = experiment.eval_rows(reports, cfg.trainer.method, seed)
            summary = json.loads((res.run_dir / "summary.json").read_text())
            summary["evaluation"] = rows
            (res.run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
            print(experiment.format_table(rows), end="")
        print(res.run_dir)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or ckpt.parent / "config.yaml"
    cfg = load_config(cfg_path)
    env, agent = experiment.load_agent(cfg, ckpt)
    reports = experiment.evaluate(cfg, agent, env, args.seed, [args.attacker], args.episodes)
    rows = experiment.eval_rows(reports, cfg.trainer.method, args.seed)
    print(json.dumps(rows, indent=2))
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    table = experiment.run_matrix(cfg, args.methods, args.attackers, workers=args.workers)
    print(experiment.format_table(table), end="")
    return 0 if all(r["status"] == "ok" for r in table) else 1


def cmd_oracle_check(args) -> int:
    cfg = _config(args)
    env = cfg.make_env()
    if not isinstance(env, TabularCmdp):
        raise UnsupportedOperation("oracle-check needs a tabular environment")
    oc = OracleConfig(resolution=args.resolution)
    eps = cfg.perturbation.eps if args.eps is None else args.eps
    if args.checkpoint:
        env, agent = experiment.load_agent(cfg, args.checkpoint)
        policies = [agent.policy]
    else:
        rng = np.random.default_rng(args.seed)
        policies = [TabularSoftmaxPolicy(env.lattice, env.n_actions, rng=rng, init_scale=1.0)
                    for _ in range(args.policies)]
    T = horizon_for(env.gamma, env.c_max, oc.tol)
    bound = oc.tol + truncation_bound(env.gamma, T, env.c_max)
    worst = 0.0
    for pol in policies:
        vi = value_iteration_worst(env, pol, eps, tol=1e-10).table
        bf = brute_force_worst_cost(env, pol, eps, T_max=T, resolution=oc.resolution)
        worst = max(worst, float(np.max(np.abs(vi - bf))))
    ok = worst <= bound
    print(f"oracle-check eps={eps} policies={len(policies)} max|VI-oracle|={worst:.3e} "
          f"bound={bound:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcrl-lab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one method for the configured seeds")
    t.add_argument("--config")
    t.add_argument("--train-attacker", choices=KINDS)
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume")
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--no-eval", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint under one attacker")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--attacker", choices=KINDS, default="none")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("matrix", help="methods x attackers table")
    m.add_argument("--config")
    m.add_argument("--methods", nargs="+", choices=METHODS)
    m.add_argument("--attackers", nargs="+", choices=KINDS)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--paper-scale", action="store_true")
    m.set_defaults(func=cmd_matrix)

    o = sub.add_parser("oracle-check", help="value iteration vs brute force")
    o.add_argument("--config")
    o.add_argument("--checkpoint")
    o.add_argument("--eps", type=float)
    o.add_argument("--policies", type=int, default=5)
    o.add_argument("--resolution", type=int, default=21)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, CheckpointCorruptError, CheckpointVersionError,
            UnsupportedOperation) as err:
        print(f"tcrl-lab: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
