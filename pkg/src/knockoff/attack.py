"""Transfer-set construction (random and adaptive) and knockoff training.

Everything here talks to the victim only through ``VictimBlackbox.query``
and reads only features and adversary labels from the pool.
"""

from __future__ import annotations

import collections
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datapool import SamplePool
from .metrics import per_class_accuracy, seen_classes, top1_accuracy
from .numerics import Mlp, SgdMomentum, backward, batch_soft_ce, fit, forward
from .policy import (
    PolicyTree,
    RewardConfig,
    RewardState,
    aggregate_reward,
    policy_snapshot,
    reward_cert,
    reward_div,
    sample_action,
    update_policy,
)
from .victim import VictimBlackbox

log = logging.getLogger(__name__)

STRATEGIES = ("random", "adaptive", "adaptive_flat")


class BudgetExceedsPool(ValueError):
    pass


@dataclass
class TransferSet:
    """Queried samples in query order with the blackbox's answers.

    ``t`` is the query index of each entry, ``step`` the policy step that
    produced it, ``z`` its adversary label and ``pool_index`` its row in the
    pool it came from.
    """

    features: np.ndarray
    outputs: np.ndarray
    z: np.ndarray
    step: np.ndarray
    pool_index: np.ndarray
    exhausted: bool = False

    def __len__(self) -> int:
        return self.features.shape[0]

    def head(self, n: int) -> "TransferSet":
        return TransferSet(
            self.features[:n], self.outputs[:n], self.z[:n], self.step[:n], self.pool_index[:n], self.exhausted
        )

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self))

    @classmethod
    def empty(cls, d_in: int, n_classes: int) -> "TransferSet":
        i = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d_in)), np.zeros((0, n_classes)), i, i.copy(), i.copy())


def _assemble(pool, chunks, n_classes, exhausted=False) -> TransferSet:
    if not chunks:
        ts = TransferSet.empty(pool.d_in, n_classes)
        ts.exhausted = exhausted
        return ts
    idx = np.concatenate([c[0] for c in chunks])
    return TransferSet(
        pool.features[idx],
        np.vstack([c[1] for c in chunks]),
        pool.adversary_labels[idx],
        np.concatenate([np.full(len(c[0]), s, dtype=np.int64) for s, c in enumerate(chunks)]),
        idx,
        exhausted,
    )


@dataclass
class OfflineConfig:
    hidden: tuple[int, ...] = (64,)
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.5
    decay_factor: float = 0.1
    decay_every: int = 60
    batch_size: int = 32


@dataclass
class AttackConfig:
    strategy: str = "random"
    budget: int = 3200
    batch_size: int = 4
    rewards: RewardConfig = field(default_factory=RewardConfig)
    online_lr: float = 0.0005
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    checkpoints: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.budget < 0 or self.batch_size < 1:
            raise ValueError("budget must be >= 0 and batch_size >= 1")
        cps = tuple(int(c) for c in self.checkpoints)
        if list(cps) != sorted(cps) or any(c < 1 or c > self.budget for c in cps):
            raise ValueError("checkpoints must be sorted and within (0, budget]")
        self.checkpoints = cps


def construct_random(pool: SamplePool, blackbox: VictimBlackbox, budget: int, seed: int, batch_size: int = 64) -> TransferSet:
    """Query ``budget`` pool samples drawn uniformly without replacement."""
    avail = pool.unqueried()
    if budget > len(avail):
        raise BudgetExceedsPool(f"budget {budget} exceeds {len(avail)} unqueried samples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(avail)[:budget]
    chunks = []
    for start in range(0, budget, batch_size):
        idx = order[start:start + batch_size]
        chunks.append((idx, blackbox.query(pool.features[idx])))
        pool.queried[idx] = True
    return _assemble(pool, chunks, blackbox.n_classes)


def construct_adaptive(
    pool: SamplePool,
    blackbox: VictimBlackbox,
    knockoff: Mlp,
    tree: PolicyTree,
    state: RewardState,
    cfg: AttackConfig,
) -> TransferSet:
    """Policy-driven querying with an online knockoff in the loop.

    Each step draws a label from the policy, queries up to ``batch_size``
    unqueried samples of that label, takes one SGD step on the knockoff,
    and feeds the batch-mean rewards back into the policy. Labels that run
    out of samples are masked. If every label runs out before the budget is
    spent, the partial set comes back with ``exhausted`` set.
    """
    rng = np.random.default_rng(cfg.seed)
    # same permutation as construct_random, split into one queue per label
    order = rng.permutation(pool.unqueried())
    queues = collections.defaultdict(collections.deque)
    for i in order:
        queues[int(pool.adversary_labels[i])].append(int(i))
    for z in range(pool.n_labels):
        if not queues[z]:
            tree.mask_leaf(z)

    opt = SgdMomentum(cfg.offline.momentum, cfg.online_lr)
    enabled = set(cfg.rewards.rewards)
    chunks = []
    spent = 0
    while spent < cfg.budget and not tree.exhausted:
        z, path = sample_action(tree, rng)
        q = queues[z]
        take = min(cfg.batch_size, cfg.budget - spent, len(q))
        idx = np.array([q.popleft() for _ in range(take)], dtype=np.int64)
        x = pool.features[idx]
        y = blackbox.query(x)
        pool.queried[idx] = True
        spent += take
        chunks.append((idx, y))

        _, grads = backward(knockoff, x, y)
        opt.step(knockoff, grads, cfg.online_lr)

        state.observe_outputs(y)
        raw = {}
        if enabled & {"cert", "uncert"}:
            cert = float(np.mean(reward_cert(y)))
            raw["cert"] = cert
            raw["uncert"] = 1.0 - cert
        if "div" in enabled:
            raw["div"] = reward_div(state)
        if "loss" in enabled:
            raw["loss"] = float(np.mean(batch_soft_ce(y, forward(knockoff, x))))
        r, baseline = aggregate_reward(raw, state)
        update_policy(tree, path, r, baseline)
        if not q:
            tree.mask_leaf(z)

    exhausted = spent < cfg.budget
    if exhausted:
        log.warning("pool exhausted after %d of %d queries", spent, cfg.budget)
    return _assemble(pool, chunks, blackbox.n_classes, exhausted)


def pretrain_on_pool(pool: SamplePool, hidden, n_classes: int, cfg: OfflineConfig, rng) -> Mlp:
    """Warm start: fit hidden layers on the pool's own adversary labels,
    then replace the output layer with a fresh ``n_classes`` head."""
    dims = [pool.d_in, *hidden, pool.n_labels]
    model = Mlp.init(dims, rng)
    opt = SgdMomentum(cfg.momentum, cfg.lr, cfg.decay_factor, cfg.decay_every)
    fit(model, pool.features, np.eye(pool.n_labels)[pool.adversary_labels],
        epochs=cfg.epochs, optimizer=opt, batch_size=cfg.batch_size, rng=rng)
    head = Mlp.init([dims[-2], n_classes], rng)
    return Mlp([pool.d_in, *hidden, n_classes], [*model.weights[:-1], head.weights[0]],
               [*model.biases[:-1], head.biases[0]])


def train_knockoff_offline(ts: TransferSet, cfg: OfflineConfig, rng: np.random.Generator, init: Mlp | None = None) -> Mlp:
    """Train a knockoff from scratch (or from ``init``) on the transfer set."""
    if len(ts) == 0:
        raise ValueError("empty transfer set")
    n_classes = ts.outputs.shape[1]
    if init is not None:
        model = init.copy()
    else:
        model = Mlp.init([ts.features.shape[1], *cfg.hidden, n_classes], rng)
    opt = SgdMomentum(cfg.momentum, cfg.lr, cfg.decay_factor, cfg.decay_every)
    fit(model, ts.features, ts.outputs, epochs=cfg.epochs, optimizer=opt, batch_size=cfg.batch_size, rng=rng)
    return model


@dataclass
class AttackReport:
    strategy: str
    defense: str
    seed: int
    curve: list[tuple[int, float, float]]
    final_top1: float
    victim_top1: float
    per_class: list[tuple[float, bool]]
    policy_snapshot: list[dict] | None
    query_count: int
    exhausted: bool = False
    wall_time: float = 0.0
    model: Mlp | None = field(default=None, repr=False)
    transfer_set: TransferSet | None = field(default=None, repr=False)


def build_transfer_set(pool: SamplePool, blackbox: VictimBlackbox, cfg: AttackConfig, rng: np.random.Generator):
    """Dispatch on ``cfg.strategy``; returns ``(transfer_set, tree or None)``."""
    if cfg.strategy == "random":
        return construct_random(pool, blackbox, cfg.budget, cfg.seed), None
    tree = PolicyTree(pool.hierarchy, flat_mode=cfg.strategy == "adaptive_flat")
    knockoff = Mlp.init([pool.d_in, *cfg.offline.hidden, blackbox.n_classes], rng)
    state = RewardState(cfg.rewards, blackbox.n_classes)
    return construct_adaptive(pool, blackbox, knockoff, tree, state, cfg), tree


def run_attack(
    universe: SamplePool,
    blackbox: VictimBlackbox,
    victim_test: SamplePool,
    cfg: AttackConfig,
    *,
    victim_top1: float,
    defense_name: str | None = None,
    init: Mlp | None = None,
) -> AttackReport:
    """Build a transfer set, retrain offline at each checkpoint, score.

    Works on a copy of ``universe``. Each checkpoint gets an independently
    trained knockoff with its own seeded stream; the last one is the final
    model (the full budget is always a checkpoint).
    """
    start = time.perf_counter()
    pool = universe.copy()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    ts, tree = build_transfer_set(pool, blackbox, cfg, np.random.default_rng(seeds[0]))
    budgets = [c for c in cfg.checkpoints if c <= len(ts)]
    if not budgets or budgets[-1] != len(ts):
        budgets.append(len(ts))
    train_seeds = seeds[1].spawn(len(budgets))

    K = blackbox.n_classes
    x_test, y_test = victim_test.features, victim_test.victim_labels
    curve = []
    model = None
    for b, ss in zip(budgets, train_seeds):
        if b == 0:
            continue
        model = train_knockoff_offline(ts.head(b), cfg.offline, np.random.default_rng(ss), init)
        acc = top1_accuracy(model, x_test, y_test)
        curve.append((b, acc, acc / victim_top1))
        log.info("%s budget=%d top1=%.4f (%.3fx)", cfg.strategy, b, acc, acc / victim_top1)

    if model is None:
        raise ValueError("no queries were made; nothing to train on")
    per_class = per_class_accuracy(model, x_test, y_test, K)
    seen = seen_classes(ts.outputs, K)
    return AttackReport(
        strategy=cfg.strategy,
        defense=defense_name or str(blackbox.defense),
        seed=cfg.seed,
        curve=curve,
        final_top1=curve[-1][1],
        victim_top1=victim_top1,
        per_class=[(float(a), bool(s)) for a, s in zip(per_class, seen)],
        policy_snapshot=policy_snapshot(tree, universe.z_names) if tree is not None else None,
        query_count=blackbox.query_count,
        exhausted=ts.exhausted,
        wall_time=time.perf_counter() - start,
        model=model,
        transfer_set=ts,
    )
