"""Command-line interface.

Every subcommand reads one YAML config (``--config``) plus ``--set key=value``
overrides and works inside ``--out-dir``. Later stages reuse the files that
earlier stages wrote there and rebuild them from the config otherwise.

Exit codes: 0 success, 1 config error, 2 runtime/training failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import evaluation as ev
from .attack import TransferSet, train_knockoff_offline
from .config import ConfigError, ExperimentConfig, World, build_world, dump_config, load_config, substream
from .datapool import SamplePool, load_hierarchy, read_pool, save_hierarchy, write_pool
from .metrics import seen_unseen_report, top1_accuracy
from .numerics import TrainingFailure, load_model, save_model
from .victim import train_victim

log = logging.getLogger("knockoff")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

FILES = {
    "train": "victim_train.kop",
    "test": "victim_test.kop",
    "pool": "pool.kop",
    "hierarchy": "hierarchy.json",
    "world": "world.json",
    "victim": "victim.npz",
    "blackbox": "blackbox.json",
    "transfer": "transfer_set.kop",
    "knockoff": "knockoff.npz",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _path(cfg: ExperimentConfig, key: str) -> str:
    return os.path.join(cfg.out_dir, FILES[key])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _save_world(cfg: ExperimentConfig, world: World) -> None:
    K = cfg.world.n_classes
    write_pool(_path(cfg, "train"), world.train, K)
    write_pool(_path(cfg, "test"), world.test, K)
    write_pool(_path(cfg, "pool"), world.pool, K)
    save_hierarchy(world.pool.hierarchy, _path(cfg, "hierarchy"))
    _write_json(_path(cfg, "world"), world.description)


def _load_world(cfg: ExperimentConfig) -> World:
    if not all(os.path.exists(_path(cfg, k)) for k in ("train", "test", "pool", "hierarchy")):
        log.info("no data in %s; generating from config", cfg.out_dir)
        world = build_world(cfg.world, cfg.seed)
        _save_world(cfg, world)
        return world
    train, _, _ = read_pool(_path(cfg, "train"))
    test, _, _ = read_pool(_path(cfg, "test"))
    pool, _, _ = read_pool(_path(cfg, "pool"))
    pool.hierarchy = load_hierarchy(_path(cfg, "hierarchy"))
    with open(_path(cfg, "world")) as fh:
        desc = json.load(fh)
    return World(None, train, test, pool, desc)


def _load_setup(cfg: ExperimentConfig) -> ev.Setup:
    world = _load_world(cfg)
    if os.path.exists(_path(cfg, "victim")):
        victim = load_model(_path(cfg, "victim"))
    else:
        log.info("no victim model in %s; training one", cfg.out_dir)
        victim = _train_and_save_victim(cfg, world)
    acc = top1_accuracy(victim, world.test.features, world.test.victim_labels)
    return ev.Setup(world, victim, acc)


def _train_and_save_victim(cfg, world):
    victim = train_victim(world.train, cfg.world.n_classes, cfg.victim, substream(cfg.seed, "victim"))
    save_model(victim, _path(cfg, "victim"))
    acc = top1_accuracy(victim, world.test.features, world.test.victim_labels)
    _write_json(_path(cfg, "blackbox"), {"model": FILES["victim"], "defense": cfg.defense, "victim_top1": acc})
    return victim


def _save_transfer_set(cfg, ts: TransferSet, n_classes: int) -> None:
    pool = SamplePool(ts.features, ts.z, [str(i) for i in range(max(int(ts.z.max(initial=-1)) + 1, 1))],
                      name="transfer")
    write_pool(_path(cfg, "transfer"), pool, n_classes, outputs=ts.outputs,
               extra={"step": ts.step.tolist(), "exhausted": ts.exhausted})


def _load_transfer_set(path) -> TransferSet:
    pool, header, outputs = read_pool(path)
    if outputs is None:
        raise ValueError(f"{path} holds no blackbox outputs")
    extra = header.get("extra", {})
    step = np.asarray(extra.get("step", range(len(pool))), dtype=np.int64)
    return TransferSet(pool.features, outputs, pool.adversary_labels, step,
                       np.arange(len(pool)), bool(extra.get("exhausted", False)))


# --- subcommands ----------------------------------------------------------


def cmd_gen_data(cfg, args):
    world = build_world(cfg.world, cfg.seed)
    _save_world(cfg, world)
    print(f"wrote {len(world.train)} train, {len(world.test)} test, {len(world.pool)} pool samples to {cfg.out_dir}")


def cmd_train_victim(cfg, args):
    world = _load_world(cfg)
    victim = _train_and_save_victim(cfg, world)
    acc = top1_accuracy(victim, world.test.features, world.test.victim_labels)
    print(f"victim top1 {acc:.4f}")


def cmd_attack(cfg, args):
    setup = _load_setup(cfg)
    report = ev.run_experiment(cfg, setup)
    _save_transfer_set(cfg, report.transfer_set, setup.victim.n_classes)
    save_model(report.model, _path(cfg, "knockoff"))
    ev.emit_results(report, cfg.out_dir)
    print(f"{report.strategy}: top1 {report.final_top1:.4f} ({report.final_top1 / report.victim_top1:.3f}x) "
          f"after {report.query_count} queries")


def cmd_train_knockoff(cfg, args):
    setup = _load_setup(cfg)
    ts = _load_transfer_set(args.transfer_set or _path(cfg, "transfer"))
    if args.budget:
        ts = ts.head(args.budget)
    offline = dataclasses.replace(cfg.attack.offline)
    model = train_knockoff_offline(ts, offline, substream(cfg.seed, "offline"))
    save_model(model, _path(cfg, "knockoff"))
    acc = top1_accuracy(model, setup.world.test.features, setup.world.test.victim_labels)
    _write_json(os.path.join(cfg.out_dir, "knockoff.json"),
                {"budget": len(ts), "top1": acc, "relative": acc / setup.victim_top1})
    print(f"knockoff top1 {acc:.4f} ({acc / setup.victim_top1:.3f}x) on {len(ts)} transfer samples")


def cmd_evaluate(cfg, args):
    setup = _load_setup(cfg)
    model = load_model(args.model or _path(cfg, "knockoff"))
    test = setup.world.test
    acc = top1_accuracy(model, test.features, test.victim_labels)
    out = {"top1": acc, "victim_top1": setup.victim_top1, "relative": acc / setup.victim_top1}
    tpath = _path(cfg, "transfer")
    if os.path.exists(tpath):
        ts = _load_transfer_set(tpath)
        out["seen_unseen"] = seen_unseen_report(model, test.features, test.victim_labels, ts.outputs,
                                                setup.victim.n_classes)
    _write_json(os.path.join(cfg.out_dir, "evaluation.json"), out)
    print(json.dumps(out, indent=1, sort_keys=True))


def cmd_sweep(cfg, args):
    setup = _load_setup(cfg)
    digest = setup.victim.digest()
    kind = args.kind
    e = cfg.eval
    if kind == "defense":
        rows, reports = ev.defense_sweep(cfg, list(e.defenses), setup, jobs=cfg.jobs)
        header = ("defense", "top1", "relative")
    elif kind == "capacity":
        rows, reports = ev.capacity_sweep(cfg, [tuple(c) for c in e.capacities], setup, jobs=cfg.jobs), []
        header = ("hidden", "top1", "relative")
    elif kind == "semi-open":
        rows, reports = ev.semi_open_sweep(cfg, e.tau_d, e.tau_k, setup, jobs=cfg.jobs)
        header = ("tau_d", "tau_k", "top1", "relative")
    elif kind == "strategy":
        reports = [ev.run_experiment(cfg, setup, strategy=s) for s in ("random", "adaptive", "adaptive_flat")]
        rows = [(r.strategy, r.final_top1, r.final_top1 / r.victim_top1) for r in reports]
        header = ("strategy", "top1", "relative")
    else:
        sets = [("cert",), ("uncert",), ("div",), ("loss",), ("cert", "div", "loss")]
        reports = []
        for rw in sets:
            rcfg = dataclasses.replace(cfg.attack.rewards, rewards=rw)
            reports.append(ev.run_experiment(cfg, setup, strategy="adaptive", rewards=rcfg))
        rows = [("+".join(rw), r.final_top1, r.final_top1 / r.victim_top1) for rw, r in zip(sets, reports)]
        header = ("rewards", "top1", "relative")
    if setup.victim.digest() != digest:
        raise RuntimeError("victim model changed during sweep")
    os.makedirs(cfg.out_dir, exist_ok=True)
    table = ev.table_csv(header, rows)
    with open(os.path.join(cfg.out_dir, f"sweep_{kind}.csv"), "w", newline="") as fh:
        fh.write(table)
    if reports:
        ev.emit_results(reports, cfg.out_dir, prefix=f"sweep_{kind}_")
    print(table, end="")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate victim data and the adversary pool"),
    "train-victim": (cmd_train_victim, "train the victim model"),
    "attack": (cmd_attack, "build a transfer set and train the knockoff"),
    "train-knockoff": (cmd_train_knockoff, "retrain a knockoff from a saved transfer set"),
    "evaluate": (cmd_evaluate, "score a saved knockoff on the victim test set"),
    "sweep": (cmd_sweep, "run an ablation sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="knockoff", description="Model extraction attacks on a simulated blackbox classifier")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. attack.budget=800 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--jobs", type=int)
        if name == "train-knockoff":
            p.add_argument("--transfer-set")
            p.add_argument("--budget", type=int, help="use only the first N transfer-set entries")
        if name == "evaluate":
            p.add_argument("--model")
        if name == "sweep":
            p.add_argument("--kind", choices=("defense", "capacity", "semi-open", "strategy", "reward"),
                           default="defense")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    for key in ("seed", "out_dir", "jobs"):
        if getattr(args, key) is not None:
            # JSON quoting keeps a path like "123" a string under YAML parsing
            overrides.append(f"{key}={json.dumps(getattr(args, key))}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "config.yaml"), "w") as fh:
            fh.write(dump_config(cfg))
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingFailure, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
