#!/usr/bin/env python3
"""Train every method on every seed of a config and tabulate cost/reward per attacker.

    python3 scripts/run_matrix.py configs/gridhazard_acceptance.yaml --workers 4
    TCRL_LAB_OUT=/tmp/runs python3 scripts/run_matrix.py configs/point_run.yaml --epochs 5
"""
import argparse
import logging
import sys

from tcrl_lab import experiment
from tcrl_lab.attackers import KINDS
from tcrl_lab.config import load_config
from tcrl_lab.trainer import METHODS


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--methods", nargs="+", choices=METHODS)
    ap.add_argument("--attackers", nargs="+", choices=KINDS)
    ap.add_argument("--seeds", nargs="+", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    if args.seeds:
        cfg.run.seeds = args.seeds
    if args.epochs:
        cfg.trainer.epochs = args.epochs
    table = experiment.run_matrix(cfg, args.methods, args.attackers, workers=args.workers)
    print(experiment.format_table(table), end="")
    print(f"written to {experiment.output_root(cfg)}")
    return 0 if all(r["status"] == "ok" for r in table) else 1


if __name__ == "__main__":
    sys.exit(main())
