#!/usr/bin/env python3
"""Budget curves for every strategy in the three worlds (pv, closed, open).

Writes ``<out>/<world>/{curve.csv,summary.json,policy.json}`` per seed and
one ``<out>/curves.csv`` with every row.
"""

import argparse
import dataclasses
import os

from knockoff.config import load_config
from knockoff.evaluation import curve_csv, emit_results, prepare, run_experiment

WORLDS = ("pv", "closed", "open")
STRATEGIES = ("random", "adaptive", "adaptive_flat")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "configs", "reference.yaml"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="results/reference")
    parser.add_argument("--worlds", nargs="+", default=list(WORLDS), choices=WORLDS)
    args = parser.parse_args()

    base = load_config(args.config)
    everything = []
    for world in args.worlds:
        for seed in args.seeds:
            cfg = dataclasses.replace(base, seed=seed, world=dataclasses.replace(base.world, kind=world))
            setup = prepare(cfg)
            budget = min(cfg.attack.budget, len(setup.world.pool))
            checkpoints = tuple(c for c in cfg.attack.checkpoints if c <= budget)
            reports = []
            for strategy in STRATEGIES:
                if world == "pv" and strategy != "random":
                    continue  # a single-source pool leaves the policy nothing to choose between
                reports.append(run_experiment(cfg, setup, strategy=strategy, budget=budget, checkpoints=checkpoints))
                r = reports[-1]
                print(f"{world:6s} seed={seed} {strategy:13s} top1={r.final_top1:.4f} ({r.final_top1 / r.victim_top1:.3f}x)")
            emit_results(reports, os.path.join(args.out, world), prefix=f"seed{seed}_")
            everything.extend((world, r) for r in reports)

    lines = []
    for world, r in everything:
        body = curve_csv([r]).splitlines()
        if not lines:
            lines.append("world," + body[0])
        lines.extend(f"{world},{row}" for row in body[1:])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "curves.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
