"""Seeded runs, run directories, evaluation and the method × attacker matrix."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, dump_config
from .trainer import EpochReport, EvalReport, build_agent, evaluate_under_attack, make_streams, train_epoch

METRICS_SCHEMA = 1
METRICS_COLUMNS = (
    "epoch", "mean_reward", "std_reward", "mean_cost", "std_cost", "worst_cost",
    "c_corr", "c_ent", "lambda_cost", "lambda_corr", "lambda_ent", "attack_norm",
    "attack_eps_bar", "attack_fallbacks", "episodes", "skipped_ratios", "actor_steps",
)
MATRIX_COLUMNS = ("method", "attacker", "mean_reward", "std_reward", "mean_cost", "std_cost",
                  "seeds", "status")
OUT_ENV = "TCRL_LAB_OUT"


def output_root(cfg: ExperimentConfig | None = None) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.run.out_dir if cfg is not None else "runs")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(report: EpochReport) -> list[str]:
    m = report.metrics()
    return [_fmt(m[c]) for c in METRICS_COLUMNS]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _append_csv(path: Path, row) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\r\n").writerow(row)


@dataclass
class RunResult:
    run_dir: Path
    method: str
    seed: int
    reports: list = field(default_factory=list)
    agent: object = None
    env: object = None


def run_dir_for(cfg: ExperimentConfig, seed: int, root: Path | None = None,
                train_attacker: str | None = None) -> Path:
    root = output_root(cfg) if root is None else Path(root)
    tag = f"-{train_attacker}" if train_attacker else ""
    return root / f"{cfg.run.name}-{cfg.trainer.method}{tag}-seed{seed}"


def setup(cfg: ExperimentConfig, seed: int, train_attacker: str | None = None):
    env = cfg.make_env()
    ppo = cfg.trainer.ppo()
    tcfg = cfg.trainer.trainer(train_attacker if train_attacker is not None else cfg.attack.train)
    streams = make_streams(seed)
    agent = build_agent(env, ppo, tcfg, streams["init"], tuple(cfg.policy.hidden),
                        tuple(cfg.policy.critic_hidden), cfg.policy.init_scale)
    return env, ppo, tcfg, streams, agent


def train(cfg: ExperimentConfig, seed: int, root: Path | None = None,
          train_attacker: str | None = None, resume: str | Path | None = None,
          stop_after: int | None = None, log=None) -> RunResult:
    """Train one (method, seed) cell and persist its run directory.

    ``stop_after`` ends the run early after that many total epochs (used to
    produce resumable partial runs).
    """
    env, ppo, tcfg, streams, agent = setup(cfg, seed, train_attacker)
    budget = cfg.perturbation.budget()
    attack = cfg.attack.make(tcfg.train_attacker, budget)
    run_dir = run_dir_for(cfg, seed, root, train_attacker)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics = run_dir / "metrics.csv"
    timing = run_dir / "timing.csv"
    if resume is not None:
        checkpoint.restore(agent, streams, checkpoint.load(resume))
        rows = _read_rows(metrics)[:agent.epoch]
        _write_csv(metrics, METRICS_COLUMNS, rows)
        _write_csv(timing, ("epoch", "wall_time"), _read_rows(timing)[:agent.epoch])
    else:
        (run_dir / "config.yaml").write_text(dump_config(cfg))
        _write_csv(metrics, METRICS_COLUMNS, [])
        _write_csv(timing, ("epoch", "wall_time"), [])
    result = RunResult(run_dir, cfg.trainer.method, seed, agent=agent, env=env)
    last = stop_after if stop_after is not None else ppo.epochs
    every = cfg.run.checkpoint_every
    while agent.epoch < min(last, ppo.epochs):
        report = train_epoch(env, agent, ppo, tcfg, budget, attack, streams)
        result.reports.append(report)
        _append_csv(metrics, metrics_row(report))
        _append_csv(timing, (report.epoch, repr(report.wall_time)))
        if log is not None:
            log(report)
        if every and agent.epoch % every == 0:
            checkpoint.save(run_dir / f"checkpoint-{agent.epoch:04d}.bin",
                            checkpoint.agent_state(agent, streams))
    checkpoint.save(run_dir / "checkpoint.bin", checkpoint.agent_state(agent, streams))
    summary = {
        "method": cfg.trainer.method, "seed": seed, "epochs": agent.epoch,
        "train_attacker": tcfg.train_attacker, "metrics_schema": METRICS_SCHEMA,
        "final": result.reports[-1].metrics() if result.reports else None,
        "wall_time": float(sum(r.wall_time for r in result.reports)),
    }
    (run_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return result


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def evaluate(cfg: ExperimentConfig, agent, env, seed: int, attackers=None,
             episodes: int | None = None) -> list[EvalReport]:
    """Each attacker sees the same evaluation streams (common random numbers)."""
    budget = cfg.perturbation.budget()
    out = []
    for kind in attackers or cfg.attack.eval:
        streams = make_streams(seed, purpose=1)
        attack = cfg.attack.make(kind, budget)
        out.append(evaluate_under_attack(env, agent, attack, episodes or cfg.run.episodes,
                                         streams, orientation=cfg.trainer.orientation))
    return out


def load_agent(cfg: ExperimentConfig, path, seed: int = 0):
    env, ppo, tcfg, streams, agent = setup(cfg, seed)
    checkpoint.restore(agent, streams, checkpoint.load(path))
    return env, agent


def eval_rows(reports: list[EvalReport], method: str, seed) -> list[dict]:
    return [{"method": method, "attacker": r.attacker, "seed": seed,
             "mean_reward": r.mean_reward, "std_reward": r.std_reward,
             "mean_cost": r.mean_cost, "std_cost": r.std_cost} for r in reports]


def _cell(args):
    cfg, method, seed, attackers, root = args
    cfg = copy.deepcopy(cfg)
    cfg.trainer.method = method
    try:
        res = train(cfg, seed, root)
        reports = evaluate(cfg, res.agent, res.env, seed, attackers)
        return {"method": method, "seed": seed, "status": "ok",
                "evals": [(r.attacker, r.episode_rewards.tolist(), r.episode_costs.tolist())
                          for r in reports]}
    except Exception as err:  # recorded per cell; the matrix continues
        return {"method": method, "seed": seed, "status": f"error: {type(err).__name__}: {err}",
                "trace": traceback.format_exc(), "evals": []}


def run_matrix(cfg: ExperimentConfig, methods=None, attackers=None, root: Path | None = None,
               workers: int = 1) -> list[dict]:
    """Train every method for every seed, evaluate against every attacker.

    Writes ``matrix.csv`` (method × attacker, pooled over seeds) and
    ``matrix_seeds.csv`` (one row per seed) under the output root.
    """
    methods = list(methods or cfg.run.methods)
    attackers = list(attackers or cfg.attack.eval)
    root = output_root(cfg) if root is None else Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, m, s, attackers, root) for m in methods for s in cfg.run.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_cell, jobs))
    else:
        cells = [_cell(j) for j in jobs]
    per_seed, table = [], []
    for m in methods:
        mine = [c for c in cells if c["method"] == m]
        errors = [c["status"] for c in mine if c["status"] != "ok"]
        for a in attackers:
            R, C, seeds = [], [], 0
            for c in mine:
                for kind, rs, cs in c["evals"]:
                    if kind != a:
                        continue
                    seeds += 1
                    R.extend(rs)
                    C.extend(cs)
                    per_seed.append([m, a, c["seed"], repr(float(np.mean(rs))),
                                     repr(float(np.std(rs))), repr(float(np.mean(cs))),
                                     repr(float(np.std(cs)))])
            status = "ok" if not errors else f"{len(errors)} failed: {errors[0]}"
            row = {"method": m, "attacker": a,
                   "mean_reward": float(np.mean(R)) if R else float("nan"),
                   "std_reward": float(np.std(R)) if R else float("nan"),
                   "mean_cost": float(np.mean(C)) if C else float("nan"),
                   "std_cost": float(np.std(C)) if C else float("nan"),
                   "seeds": seeds, "status": status}
            table.append(row)
    _write_csv(root / "matrix.csv", MATRIX_COLUMNS,
               [[_fmt(r[c]) for c in MATRIX_COLUMNS] for r in table])
    _write_csv(root / "matrix_seeds.csv",
               ("method", "attacker", "seed", "mean_reward", "std_reward", "mean_cost", "std_cost"),
               per_seed)
    return table


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"{'method':<12}{'attacker':<10}{'reward':>20}{'cost':>20}\n")
    for r in rows:
        buf.write(f"{r['method']:<12}{r['attacker']:<10}"
                  f"{r['mean_reward']:>11.3f} ± {r['std_reward']:<6.3f}"
                  f"{r['mean_cost']:>11.3f} ± {r['std_cost']:<6.3f}\n")
    return buf.getvalue()
