"""Experiment configuration: dataclasses, YAML loading, seeded sub-streams,
and assembly of the synthetic worlds the experiments run in."""

from __future__ import annotations

import dataclasses
import typing
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from .attack import AttackConfig, OfflineConfig
from .datapool import (
    DatasetSpec,
    SamplePool,
    analog_pool,
    build_hierarchy,
    build_universe,
    distractor_pool,
    gen_synthetic,
    random_means,
    split_counts,
)
from .policy import RewardConfig
from .victim import DefensePolicy, VictimConfig

CONFIG_VERSION = 1
WORLD_KINDS = ("pv", "closed", "open")


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of one experiment."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def subseed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31))


@dataclass
class WorldConfig:
    """Synthetic victim task and adversary pool.

    ``kind``: ``pv`` queries the victim's own training set, ``closed`` a
    universe that contains it plus unrelated sources, ``open`` a pool that
    shares no samples with it and has look-alike labels for a fraction
    ``open_overlap`` of the victim classes.
    """

    kind: str = "closed"
    d_in: int = 32
    n_classes: int = 8
    modes: int = 6
    separation: float = 8.0
    noise: float = 1.0
    train_per_class: int = 100
    test_per_class: int = 100
    n_labels: int = 64
    pool_size: int = 8000
    source_size: int = 8
    distractor_centre: float = 4.0
    distractor_label: float = 6.0
    distractor_spread: float = 2.5
    open_overlap: float = 0.25
    analog_shift: float = 1.0
    analog_angle: float = 0.2
    n_coarse: int = 8
    withheld: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in WORLD_KINDS:
            raise ConfigError(f"world.kind must be one of {WORLD_KINDS}")
        if self.n_classes < 2 or self.d_in < 1:
            raise ConfigError("need d_in >= 1 and n_classes >= 2")
        if not 0.0 <= self.open_overlap <= 1.0:
            raise ConfigError("open_overlap must be in [0, 1]")


@dataclass
class EvalConfig:
    defenses: tuple[str, ...] = ("none", "topk:2", "argmax")
    capacities: tuple[tuple[int, ...], ...] = ((32,), (64,), (128,), (64, 64))
    tau_d: tuple[float, ...] = (0.1, 0.5, 1.0)
    tau_k: tuple[float, ...] = (1.0,)


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: str = "results"
    jobs: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    defense: str = "none"
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        try:
            DefensePolicy.parse(self.defense)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# --- (de)serialization ----------------------------------------------------


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(tp, value, where):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = args[0]
        return tuple(_coerce(inner, v, where) for v in value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    if "version" not in data:
        raise ConfigError("config is missing its version field")
    return _build(ExperimentConfig, data, "config")


def config_to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    data = yaml.safe_load(yaml.safe_dump(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = config_to_dict(ExperimentConfig())
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if "version" not in loaded:
            raise ConfigError(f"{path}: missing version field")
        data = _merge(data, loaded)
    return config_from_dict(apply_overrides(data, overrides))


def _merge(base, new):
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def reference_config(**world) -> ExperimentConfig:
    """Reference desk-scale setting: d_in=32, K=8, 64 labels, 800 victim
    training samples, 8000 pool samples, B=3200."""
    return ExperimentConfig(
        world=WorldConfig(**world),
        attack=AttackConfig(
            strategy="random",
            budget=3200,
            rewards=RewardConfig(("cert",), 10),
            offline=OfflineConfig(),
            checkpoints=(320, 800, 1600, 3200),
        ),
    )


# --- worlds ---------------------------------------------------------------


@dataclass
class World:
    spec: DatasetSpec
    train: SamplePool
    test: SamplePool
    pool: SamplePool
    description: dict


def victim_spec(w: WorldConfig, seed: int) -> DatasetSpec:
    rng = substream(seed, "data/means")
    means = random_means(w.n_classes, w.modes, w.d_in, w.separation, rng)
    return DatasetSpec(
        means,
        scale=w.noise,
        n_train=w.train_per_class,
        n_test=w.test_per_class,
        seed=subseed(seed, "data/victim"),
        class_names=[f"class{k}" for k in range(w.n_classes)],
    )


def _distractor_sources(w: WorldConfig, n_labels, n_samples, rng, prefix):
    n_sources = max(1, -(-n_labels // w.source_size))
    label_split = split_counts(n_labels, n_sources)
    sample_split = split_counts(n_samples, n_labels)
    pools, start = [], 0
    for s, n in enumerate(label_split):
        counts = sample_split[start:start + n]
        start += n
        pools.append(distractor_pool(
            n, counts, w.d_in, rng,
            centre_scale=w.distractor_centre,
            label_scale=w.distractor_label,
            spread=w.distractor_spread,
            prefix=f"{prefix}{s}",
        ))
    return pools


def build_world(w: WorldConfig, seed: int) -> World:
    spec = victim_spec(w, seed)
    train, test, desc = gen_synthetic(spec)
    rng = substream(seed, "data/pool")
    if w.kind == "pv":
        keep = ~np.isin(train.victim_labels, list(w.withheld))
        pool = train.subset(np.flatnonzero(keep))
        pool.name = "victim"
    elif w.kind == "closed":
        n_extra = w.n_labels - w.n_classes
        if n_extra < 0 or w.pool_size < len(train):
            raise ConfigError("closed world needs n_labels >= K and pool_size >= victim train size")
        sources = [train] if n_extra == 0 else [train, *_distractor_sources(w, n_extra, w.pool_size - len(train), rng, "source")]
        pool = build_universe(sources)
    else:
        n_analog = int(round(w.open_overlap * w.n_classes))
        if n_analog > w.n_labels:
            raise ConfigError("open_overlap needs more labels than n_labels")
        per_label = split_counts(w.pool_size, w.n_labels)
        parts = []
        if n_analog:
            classes = sorted(rng.choice(w.n_classes, size=n_analog, replace=False).tolist())
            parts.append(analog_pool(spec, classes, per_label[0], rng, shift=w.analog_shift, angle=w.analog_angle))
        n_rest = w.n_labels - n_analog
        if n_rest:
            parts.extend(_distractor_sources(w, n_rest, sum(per_label[n_analog:]), rng, "open"))
        pool = build_universe(parts)
        if w.n_coarse:
            pool.hierarchy = build_hierarchy(pool, min(w.n_coarse, pool.n_labels))
    pool.name = w.kind
    desc = dict(desc, world=w.kind, pool_size=len(pool), n_labels=pool.n_labels)
    return World(spec, train, test, pool, desc)
