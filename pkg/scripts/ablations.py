#!/usr/bin/env python3
"""Ablation tables: truncation defenses, knockoff capacity, semi-open
filtering, reward sets and the reward window. One CSV per table."""

import argparse
import dataclasses
import os

from knockoff.config import load_config
from knockoff.evaluation import capacity_sweep, defense_sweep, prepare, run_experiment, semi_open_sweep, table_csv
from knockoff.policy import RewardConfig

TABLES = ("defense", "capacity", "semi-open", "rewards", "window")
REWARD_SETS = (("cert",), ("uncert",), ("div",), ("loss",), ("cert", "div"), ("cert", "div", "loss"))


def rows_for(table, cfg, setup, jobs):
    e = cfg.eval
    if table == "defense":
        rows, _ = defense_sweep(cfg, ["none", "topk:1", "topk:2", "rounding:1", "rounding:2", "argmax"], setup, jobs)
        return ("defense", "top1", "relative"), rows
    if table == "capacity":
        return ("hidden", "top1", "relative"), capacity_sweep(cfg, list(e.capacities), setup, jobs)
    if table == "semi-open":
        rows = []
        for strategy in ("random", "adaptive"):
            scfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, strategy=strategy))
            part, _ = semi_open_sweep(scfg, e.tau_d, e.tau_k, setup, jobs)
            rows += [(strategy, *r) for r in part]
        return ("strategy", "tau_d", "tau_k", "top1", "relative"), rows
    if table == "rewards":
        rows = []
        for rewards in REWARD_SETS:
            r = run_experiment(cfg, setup, strategy="adaptive", rewards=RewardConfig(rewards, cfg.attack.rewards.window))
            rows.append(("+".join(rewards), r.final_top1, r.final_top1 / r.victim_top1))
        return ("rewards", "top1", "relative"), rows
    rows = []
    for window in (1, 5, 10, 20, 50):
        r = run_experiment(cfg, setup, strategy="adaptive", rewards=RewardConfig(cfg.attack.rewards.rewards, window))
        rows.append((window, r.final_top1, r.final_top1 / r.victim_top1))
    return ("window", "top1", "relative"), rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "configs", "reference.yaml"))
    parser.add_argument("--tables", nargs="+", default=list(TABLES), choices=TABLES)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--budget", type=int, help="override attack.budget (checkpoints are dropped)")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="results/ablations")
    args = parser.parse_args()

    cfg = dataclasses.replace(load_config(args.config), seed=args.seed)
    if args.budget:
        cfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, budget=args.budget, checkpoints=()))
    setup = prepare(cfg)
    os.makedirs(args.out, exist_ok=True)
    for table in args.tables:
        header, rows = rows_for(table, cfg, setup, args.jobs)
        text = table_csv(header, rows)
        with open(os.path.join(args.out, f"{table}.csv"), "w") as fh:
            fh.write(text)
        print(f"# {table}\n{text}")


if __name__ == "__main__":
    main()
