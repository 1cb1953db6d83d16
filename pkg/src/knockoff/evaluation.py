"""Experiment drivers, ablation sweeps and result files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, AttackReport, build_transfer_set, run_attack, train_knockoff_offline
from .config import ExperimentConfig, World, build_world, substream, subseed
from .datapool import OverlapConfig, semi_open_filter
from .metrics import seen_unseen_report, top1_accuracy
from .numerics import Mlp
from .victim import DefensePolicy, VictimBlackbox, train_victim

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("budget", "top1", "relative", "strategy", "defense", "seed")


@dataclass
class Setup:
    """Everything the victim side owns for one experiment."""

    world: World
    victim: Mlp
    victim_top1: float


def prepare(cfg: ExperimentConfig) -> Setup:
    world = build_world(cfg.world, cfg.seed)
    victim = train_victim(world.train, cfg.world.n_classes, cfg.victim, substream(cfg.seed, "victim"))
    acc = top1_accuracy(victim, world.test.features, world.test.victim_labels)
    return Setup(world, victim, acc)


def attack_config(cfg: ExperimentConfig, **changes) -> AttackConfig:
    """The attack section with its seed derived from the global seed
    (``attack.seed`` acts as a replicate index)."""
    seed = subseed(cfg.seed, f"attack/{cfg.attack.seed}")
    return dataclasses.replace(cfg.attack, seed=seed, **changes)


def run_experiment(cfg: ExperimentConfig, setup: Setup | None = None, *, defense: str | None = None,
                   pool=None, **attack_changes) -> AttackReport:
    """One attack against a fresh blackbox. ``setup`` may be shared between
    runs: it is only read."""
    setup = setup or prepare(cfg)
    defense = defense or cfg.defense
    blackbox = VictimBlackbox(setup.victim.copy(), DefensePolicy.parse(defense))
    acfg = attack_config(cfg, **attack_changes)
    report = run_attack(pool if pool is not None else setup.world.pool, blackbox, setup.world.test, acfg,
                        victim_top1=setup.victim_top1, defense_name=defense)
    report.seed = cfg.seed
    return report


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _defense_member(args):
    cfg, setup, defense = args
    return run_experiment(cfg, setup, defense=defense)


def defense_sweep(cfg: ExperimentConfig, defenses, setup: Setup | None = None, jobs: int = 1):
    """One attack per defense with a shared seed, pool and budget.

    Returns ``(rows, reports)``; rows are ``(defense, final_top1, relative)``.
    """
    setup = setup or prepare(cfg)
    reports = _map(_defense_member, [(cfg, setup, d) for d in defenses], jobs)
    rows = [(d, r.final_top1, r.final_top1 / r.victim_top1) for d, r in zip(defenses, reports)]
    return rows, reports


def _capacity_member(args):
    ts, offline, hidden, seed, test_x, test_y = args
    offline = dataclasses.replace(offline, hidden=tuple(hidden))
    model = train_knockoff_offline(ts, offline, substream(seed, f"capacity/{'x'.join(map(str, hidden))}"))
    return top1_accuracy(model, test_x, test_y)


def capacity_sweep(cfg: ExperimentConfig, capacities, setup: Setup | None = None, jobs: int = 1):
    """Knockoffs of several hidden-layer shapes trained on one transfer set.

    Rows are ``(hidden, final_top1, relative)``.
    """
    setup = setup or prepare(cfg)
    blackbox = VictimBlackbox(setup.victim.copy(), DefensePolicy.parse(cfg.defense))
    acfg = attack_config(cfg)
    ts, _ = build_transfer_set(setup.world.pool.copy(), blackbox, acfg, substream(acfg.seed, "capacity/online"))
    test = setup.world.test
    accs = _map(
        _capacity_member,
        [(ts, acfg.offline, tuple(h), acfg.seed, test.features, test.victim_labels) for h in capacities],
        jobs,
    )
    return [(tuple(h), a, a / setup.victim_top1) for h, a in zip(capacities, accs)]


def _semi_open_member(args):
    cfg, setup, tau_d, tau_k = args
    pool = semi_open_filter(setup.world.pool, setup.world.train, OverlapConfig(tau_d, tau_k, cfg.seed))
    budget = min(cfg.attack.budget, len(pool))
    checkpoints = tuple(c for c in cfg.attack.checkpoints if c <= budget)
    return run_experiment(cfg, setup, pool=pool, budget=budget, checkpoints=checkpoints)


def semi_open_sweep(cfg: ExperimentConfig, tau_d_grid, tau_k_grid, setup: Setup | None = None, jobs: int = 1):
    """Full attack on the pool filtered to each ``(tau_d, tau_k)``.

    Rows are ``(tau_d, tau_k, final_top1, relative)``.
    """
    setup = setup or prepare(cfg)
    grid = [(d, k) for d in tau_d_grid for k in tau_k_grid]
    reports = _map(_semi_open_member, [(cfg, setup, d, k) for d, k in grid], jobs)
    rows = [(d, k, r.final_top1, r.final_top1 / r.victim_top1) for (d, k), r in zip(grid, reports)]
    return rows, reports


def seen_unseen(report: AttackReport, setup: Setup) -> dict:
    test = setup.world.test
    return seen_unseen_report(report.model, test.features, test.victim_labels,
                              report.transfer_set.outputs, setup.victim.n_classes)


# --- result files ---------------------------------------------------------


def curve_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in reports:
        for budget, top1, rel in r.curve:
            w.writerow([budget, repr(float(top1)), repr(float(rel)), r.strategy, r.defense, r.seed])
    return buf.getvalue()


def summary_dict(report: AttackReport) -> dict:
    # wall time is left out so identical runs give identical files
    return {
        "strategy": report.strategy,
        "defense": report.defense,
        "seed": report.seed,
        "final_top1": report.final_top1,
        "victim_top1": report.victim_top1,
        "relative": report.final_top1 / report.victim_top1,
        "query_count": report.query_count,
        "exhausted": report.exhausted,
        "per_class": [{"class": k, "top1": a, "seen": s} for k, (a, s) in enumerate(report.per_class)],
        "curve": [{"budget": b, "top1": a, "relative": r} for b, a, r in report.curve],
    }


def _write(path, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_results(reports, out_dir, prefix: str = "") -> list[str]:
    """Write ``curve.csv``, ``summary.json`` and ``policy.json``.

    Output depends only on the reports' contents, never on timing.
    """
    if isinstance(reports, AttackReport):
        reports = [reports]
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror or exc}") from exc
    paths = []
    curve_path = os.path.join(out_dir, f"{prefix}curve.csv")
    _write(curve_path, curve_csv(reports))
    paths.append(curve_path)
    summary_path = os.path.join(out_dir, f"{prefix}summary.json")
    summaries = [summary_dict(r) for r in reports]
    _write(summary_path, json.dumps(summaries if len(summaries) > 1 else summaries[0], indent=1, sort_keys=True) + "\n")
    paths.append(summary_path)
    snapshots = [r.policy_snapshot for r in reports if r.policy_snapshot is not None]
    if snapshots:
        policy_path = os.path.join(out_dir, f"{prefix}policy.json")
        _write(policy_path, json.dumps(snapshots if len(snapshots) > 1 else snapshots[0], indent=1, sort_keys=True) + "\n")
        paths.append(policy_path)
    return paths


def table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else
                    "x".join(map(str, v)) if isinstance(v, tuple) else v for v in row])
    return buf.getvalue()
