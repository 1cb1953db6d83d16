import numpy as np
import pytest

from knockoff.attack import (
    AttackConfig,
    BudgetExceedsPool,
    OfflineConfig,
    TransferSet,
    build_transfer_set,
    construct_random,
    run_attack,
    train_knockoff_offline,
)
from knockoff.datapool import HierarchyNode, SamplePool
from knockoff.evaluation import attack_config
from knockoff.numerics import Mlp, entropy, forward, soft_ce_loss
from knockoff.policy import RewardConfig, leaf_probabilities
from knockoff.victim import VictimBlackbox


class GuardedPool(SamplePool):
    """Pool whose victim labels blow up when read."""

    def __getattribute__(self, name):
        if name == "victim_labels" and object.__getattribute__(self, "_armed"):
            raise AssertionError("adversary read victim labels")
        return object.__getattribute__(self, name)

    _armed = False


class StubBlackbox:
    """Only the query interface; no model to peek at."""

    def __init__(self, n_classes=3, d_in=2):
        self._w = np.random.default_rng(0).normal(size=(d_in, n_classes))
        self.n_classes = n_classes
        self.query_count = 0

    def query(self, x):
        self.query_count += len(x)
        z = x @ self._w
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def small_pool(n_labels=4, per=25, guarded=True, hierarchy=None):
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(n_labels), per)
    x = rng.normal(size=(len(y), 2)) + y[:, None]
    cls = GuardedPool if guarded else SamplePool
    pool = cls(x, y, [f"l{i}" for i in range(n_labels)], victim_labels=y % 3, hierarchy=hierarchy)
    pool._armed = guarded
    return pool


def adaptive_cfg(**kw):
    base = dict(strategy="adaptive", budget=40, rewards=RewardConfig(("cert", "div", "loss")), seed=3,
                offline=OfflineConfig(hidden=(8,), epochs=5))
    return AttackConfig(**{**base, **kw})


# --- random ----------------------------------------------------------------


def test_random_whole_pool_queried_once():
    pool = small_pool()
    box = StubBlackbox()
    ts = construct_random(pool, box, len(pool), seed=1)
    assert sorted(ts.pool_index.tolist()) == list(range(len(pool)))
    assert pool.queried.all() and box.query_count == len(pool)
    with pytest.raises(BudgetExceedsPool):
        construct_random(pool, box, 1, seed=1)


def test_random_deterministic():
    a = construct_random(small_pool(), StubBlackbox(), 30, seed=5)
    b = construct_random(small_pool(), StubBlackbox(), 30, seed=5)
    assert a.pool_index.tolist() == b.pool_index.tolist()
    assert a.outputs.tobytes() == b.outputs.tobytes()
    c = construct_random(small_pool(), StubBlackbox(), 30, seed=6)
    assert c.pool_index.tolist() != a.pool_index.tolist()


def test_random_zero_budget():
    box = StubBlackbox()
    ts = construct_random(small_pool(), box, 0, seed=1)
    assert len(ts) == 0 and box.query_count == 0


# --- adaptive --------------------------------------------------------------


def test_adaptive_no_repeats_and_provenance():
    pool = small_pool()
    ts, tree = build_transfer_set(pool, StubBlackbox(), adaptive_cfg(budget=90), np.random.default_rng(0))
    assert len(ts) == 90 and len(set(ts.pool_index.tolist())) == 90
    assert np.all(np.diff(ts.t) > 0) and np.all(np.diff(ts.step) >= 0)
    np.testing.assert_array_equal(ts.z, pool.adversary_labels[ts.pool_index])
    assert sum(leaf.N for leaf in (tree.leaf(z) for z in range(4))) == ts.step[-1] + 1


def test_adaptive_single_update_when_batch_is_budget():
    ts, tree = build_transfer_set(small_pool(), StubBlackbox(), adaptive_cfg(budget=8, batch_size=8),
                                  np.random.default_rng(0))
    assert len(ts) == 8
    assert sum(c.N for c in tree.root.children) == 1
    assert set(ts.step.tolist()) == {0}


def test_adaptive_exhaustion_returns_partial_set():
    pool = small_pool(n_labels=2, per=5)
    box = StubBlackbox()
    ts, tree = build_transfer_set(pool, box, adaptive_cfg(budget=20), np.random.default_rng(0))
    assert ts.exhausted and len(ts) == 10 and tree.exhausted
    assert box.query_count == 10


def test_single_leaf_adaptive_equals_random():
    pool = small_pool(n_labels=1, per=50)
    cfg = adaptive_cfg(budget=30)
    ts_a, _ = build_transfer_set(pool, StubBlackbox(), cfg, np.random.default_rng(0))
    ts_r = construct_random(small_pool(n_labels=1, per=50), StubBlackbox(), 30, seed=cfg.seed)
    assert ts_a.pool_index.tolist() == ts_r.pool_index.tolist()


def test_adaptive_hierarchical_tree():
    h = HierarchyNode("entity", [HierarchyNode("a", [HierarchyNode("l0", z=0), HierarchyNode("l1", z=1)]),
                                 HierarchyNode("b", [HierarchyNode("l2", z=2), HierarchyNode("l3", z=3)])])
    ts, tree = build_transfer_set(small_pool(hierarchy=h), StubBlackbox(), adaptive_cfg(), np.random.default_rng(0))
    assert len(ts) == 40
    # one update per step at every level; a label running short yields a short batch
    n_steps = ts.step[-1] + 1
    assert sum(c.N for c in tree.root.children) == n_steps
    assert sum(tree.leaf(z).N for z in range(4)) == n_steps


def test_cert_reward_finds_confident_label():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(8), [1000] + [200] * 7)
    x = np.column_stack([np.where(y == 0, 3.0, 0.0), rng.normal(size=len(y))])
    pool = SamplePool(x, y, [f"l{i}" for i in range(8)])
    # confident (margin ~1) on label 0's samples, uniform on everything else
    victim = Mlp([2, 2], [np.array([[5.0, 0.0], [-5.0, 0.0]])], [np.zeros(2)])
    cfg = AttackConfig("adaptive_flat", budget=800, rewards=RewardConfig(("cert",)), seed=0)
    _, tree = build_transfer_set(pool, VictimBlackbox(victim), cfg, rng)
    assert leaf_probabilities(tree)[0] >= 5 / 8


def test_adaptive_prefers_victim_relevant_labels(closed_setup):
    cfg, setup = closed_setup
    pool = setup.world.pool
    relevant = [z for z, n in enumerate(pool.z_names) if n in setup.world.train.z_names]
    assert len(relevant) == 8 and pool.n_labels == 64
    budget = len(pool) // 4
    counts = {}
    for strategy in ("random", "adaptive"):
        acfg = attack_config(cfg, strategy=strategy, budget=budget, checkpoints=())
        ts, _ = build_transfer_set(pool.copy(), VictimBlackbox(setup.victim.copy()), acfg, np.random.default_rng(0))
        counts[strategy] = int(np.isin(ts.z, relevant).sum())
    assert counts["adaptive"] > counts["random"]


# --- offline ---------------------------------------------------------------


def test_offline_overfits_single_entry():
    x = np.array([[0.3, -1.2]])
    y = np.array([[0.6, 0.3, 0.1]])
    ts = TransferSet(x, y, np.zeros(1, int), np.zeros(1, int), np.zeros(1, int))
    cfg = OfflineConfig(hidden=(8,), epochs=400, lr=0.1, decay_every=1000)
    m = train_knockoff_offline(ts, cfg, np.random.default_rng(0))
    assert soft_ce_loss(y[0], forward(m, x[0])) - entropy(y[0]) < 0.05


def test_offline_empty_set_rejected():
    with pytest.raises(ValueError):
        train_knockoff_offline(TransferSet.empty(2, 3), OfflineConfig(), np.random.default_rng(0))


def test_attack_config_validates():
    with pytest.raises(ValueError):
        AttackConfig(strategy="greedy")
    with pytest.raises(ValueError):
        AttackConfig(budget=10, checkpoints=(20,))
    with pytest.raises(ValueError):
        AttackConfig(budget=10, checkpoints=(5, 3))


# --- run_attack ------------------------------------------------------------


def test_run_attack_report(closed_setup):
    cfg, setup = closed_setup
    world = setup.world
    acfg = attack_config(cfg, budget=320, checkpoints=(320,))
    box = VictimBlackbox(setup.victim.copy())
    report = run_attack(world.pool, box, world.test, acfg, victim_top1=setup.victim_top1)
    assert len(report.curve) == 1 and report.curve[0][0] == 320
    assert report.query_count == 320 and not report.exhausted
    assert not world.pool.queried.any()
    assert report.policy_snapshot is None
    assert len(report.per_class) == 8


def test_curve_rises(closed_setup):
    cfg, setup = closed_setup
    acfg = attack_config(cfg, checkpoints=(320, 3200))
    report = run_attack(setup.world.pool, VictimBlackbox(setup.victim.copy()), setup.world.test, acfg,
                        victim_top1=setup.victim_top1)
    (_, early, _), (_, final, _) = report.curve
    assert final >= early - 0.05
    assert report.final_top1 == final
