import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from knockoff.datapool import HierarchyNode
from knockoff.policy import (
    PolicyTree,
    RewardConfig,
    RewardState,
    action_probs,
    aggregate_reward,
    leaf_probabilities,
    policy_snapshot,
    reward_cert,
    reward_div,
    reward_loss,
    reward_uncert,
    sample_action,
    update_policy,
)

from .oracles import path_probability


def two_level(n_coarse=2, per=4):
    groups = [
        HierarchyNode(f"g{g}", [HierarchyNode(f"z{g * per + i}", z=g * per + i) for i in range(per)])
        for g in range(n_coarse)
    ]
    return HierarchyNode("entity", groups)


def bandit_oracle(H, chosen, adv, n):
    """Independent gradient-bandit arithmetic on one node."""
    e = [math.exp(h) for h in H]
    pi = [v / sum(e) for v in e]
    alpha = 1.0 / n
    return [h + alpha * adv * ((1 - pi[j]) if j == chosen else -pi[j]) for j, h in enumerate(H)]


# --- action probabilities --------------------------------------------------


def test_action_probs_examples():
    tree = PolicyTree.flat(["a", "b", "c"])
    np.testing.assert_allclose(action_probs(tree.root), [1 / 3] * 3)
    tree = PolicyTree.flat(["a", "b"])
    tree.root.children[0].H = math.log(2)
    np.testing.assert_allclose(action_probs(tree.root), [2 / 3, 1 / 3])
    for c in tree.root.children:
        c.H += 17.0
    np.testing.assert_allclose(action_probs(tree.root), [2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        action_probs(tree.root.children[0])


def test_masked_children_get_zero():
    tree = PolicyTree.flat(["a", "b", "c"])
    tree.mask_leaf(1)
    np.testing.assert_allclose(action_probs(tree.root), [0.5, 0, 0.5])
    tree.mask_leaf(0)
    tree.mask_leaf(2)
    assert tree.exhausted
    with pytest.raises(ValueError):
        sample_action(tree, np.random.default_rng(0))


def test_masking_propagates_to_ancestors():
    tree = PolicyTree(two_level(2, 2))
    tree.mask_leaf(0)
    assert not tree.root.children[0].masked
    tree.mask_leaf(1)
    assert tree.root.children[0].masked and not tree.exhausted
    rng = np.random.default_rng(0)
    assert {sample_action(tree, rng)[0] for _ in range(200)} == {2, 3}


# --- sampling --------------------------------------------------------------


def test_single_leaf_always_drawn():
    tree = PolicyTree.flat(["only"])
    rng = np.random.default_rng(0)
    assert all(sample_action(tree, rng)[0] == 0 for _ in range(50))


def test_uniform_sampling_frequencies():
    tree = PolicyTree(two_level(2, 4))
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.bincount([sample_action(tree, rng)[0] for _ in range(n)], minlength=8)
    sigma = math.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) < 3 * sigma)


def test_strong_potential_dominates():
    tree = PolicyTree(two_level(2, 4))
    tree.root.children[1].H = 20.0
    tree.leaf(6).H = 20.0
    _, path = sample_action(tree, np.random.default_rng(0))
    exact = path_probability(action_probs, [(tree.root, 1), (tree.root.children[1], 2)])
    assert exact == pytest.approx(leaf_probabilities(tree)[6])
    assert exact > 0.99
    rng = np.random.default_rng(1)
    freq = np.mean([sample_action(tree, rng)[0] == 6 for _ in range(2000)])
    assert freq > 0.99


def test_path_shape():
    tree = PolicyTree(two_level(3, 2))
    z, path = sample_action(tree, np.random.default_rng(3))
    assert path[0][0] is tree.root and len(path) == 2
    assert path[-1][0].children[path[-1][1]].z == z


def test_flat_mode_flattens():
    tree = PolicyTree(two_level(2, 3), flat_mode=True)
    assert [c.z for c in tree.root.children] == list(range(6))
    assert tree.flat_mode


# --- updates ---------------------------------------------------------------


def test_update_two_arm_example():
    tree = PolicyTree.flat(["a", "b"])
    update_policy(tree, [(tree.root, 0)], 1.0, 0.0)
    assert [c.H for c in tree.root.children] == [0.5, -0.5]
    assert tree.leaf(0).N == 1 and tree.leaf(1).N == 0


def test_zero_advantage_no_change():
    tree = PolicyTree(two_level())
    tree.leaf(2).H = 0.3
    before = [n.H for n in tree.root.walk()]
    _, path = sample_action(tree, np.random.default_rng(0))
    update_policy(tree, path, 0.7, 0.7)
    assert [n.H for n in tree.root.walk()] == before


def test_update_matches_oracle_across_visits():
    tree = PolicyTree.flat(["a", "b", "c"])
    H = [0.0, 0.0, 0.0]
    for step, (arm, adv) in enumerate([(0, 1.0), (0, -0.5), (2, 0.25), (0, 2.0)]):
        n = tree.leaf(arm).N + 1
        H = bandit_oracle(H, arm, adv, n)
        update_policy(tree, [(tree.root, arm)], adv, 0.0)
        np.testing.assert_allclose([c.H for c in tree.root.children], H, atol=1e-15)


def test_update_rejects_foreign_path():
    a, b = PolicyTree(two_level()), PolicyTree(two_level())
    _, path = sample_action(a, np.random.default_rng(0))
    with pytest.raises(ValueError):
        update_policy(b, path, 1.0, 0.0)
    with pytest.raises(ValueError):
        update_policy(a, path[:1], 1.0, 0.0)
    with pytest.raises(ValueError):
        update_policy(a, [(a.root, 9)], 1.0, 0.0)


update_seq = st.lists(st.tuples(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=30)


@given(update_seq, st.integers(0, 3))
def test_update_invariants(seq, n_mask):
    tree = PolicyTree(two_level(3, 3))
    for z in range(n_mask):
        tree.mask_leaf(z * 3)
    for seed, r, b in seq:
        _, path = sample_action(tree, np.random.default_rng(seed))
        before = [sum(c.H for c in node.children) for node, _ in path]
        p_before = action_probs(path[0][0])[path[0][1]]
        update_policy(tree, path, r, b)
        for (node, _), s in zip(path, before):
            assert abs(sum(c.H for c in node.children) - s) < 1e-9
            assert abs(action_probs(node).sum() - 1) < 1e-9
        p_after = action_probs(path[0][0])[path[0][1]]
        if r - b > 1e-6 and p_before < 1.0 - 1e-9:
            assert p_after > p_before
        assert all(math.isfinite(n.H) and n.N >= 0 for n in tree.root.walk())


def test_stationary_bandit_concentrates():
    tree = PolicyTree.flat([str(i) for i in range(5)])
    state = RewardState(RewardConfig(("cert",)))
    rng = np.random.default_rng(0)
    for _ in range(2000):
        z, path = sample_action(tree, rng)
        r, b = aggregate_reward({"cert": 1.0 if z == 3 else 0.0}, state)
        update_policy(tree, path, r, b)
    assert action_probs(tree.root)[3] > 0.9


def test_policy_snapshot():
    tree = PolicyTree(two_level(2, 2))
    _, path = sample_action(tree, np.random.default_rng(0))
    update_policy(tree, path, 1.0, 0.0)
    snap = policy_snapshot(tree, ["a", "b", "c", "d"])
    assert [r["z"] for r in snap] == [0, 1, 2, 3]
    assert sum(r["prob"] for r in snap) == pytest.approx(1.0)
    assert sum(r["visits"] for r in snap) == 1
    assert snap[0]["name"] == "a"


# --- rewards ---------------------------------------------------------------


def test_reward_examples():
    assert reward_cert([0.7, 0.2, 0.1]) == pytest.approx(0.5)
    assert reward_cert([0.25] * 4) == 0.0
    assert reward_cert([0, 1, 0]) == 1.0
    assert reward_uncert([0.25] * 4) == 1.0
    assert reward_uncert([0, 1, 0]) == 0.0
    assert reward_uncert([0.7, 0.2, 0.1]) == pytest.approx(0.5)
    assert reward_loss([1, 0], [1, 0]) == 0.0
    assert reward_loss([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        reward_cert([1.0])
    np.testing.assert_allclose(reward_cert(np.array([[0.7, 0.2, 0.1], [0.4, 0.4, 0.2]])), [0.5, 0.0], atol=1e-15)


def test_loss_decreases_along_mixture_path():
    y = np.array([0.7, 0.2, 0.1])
    u = np.ones(3) / 3
    # cross-entropy minus entropy is KL, which falls as q moves toward y
    vals = [reward_loss(y, (1 - lam) * u + lam * y) for lam in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_div_examples():
    state = RewardState(RewardConfig(("div",), window=1))
    assert reward_div(state) == 0.0
    state.observe_outputs([[0.5, 0.5]])
    assert reward_div(state) == 0.0
    state.observe_outputs([[0.7, 0.3]])
    np.testing.assert_allclose(state.mean_posterior, [0.6, 0.4])
    assert reward_div(state) == pytest.approx(0.1)

    state = RewardState(RewardConfig(("div",), window=1))
    state.observe_outputs([[0.5, 0.5]])
    state.observe_outputs([[0.3, 0.7]])
    assert reward_div(state) == pytest.approx(0.1)


def test_div_constant_stream_is_zero_after_warmup():
    state = RewardState(RewardConfig(("div",), window=3))
    for _ in range(10):
        state.observe_outputs([[0.2, 0.8], [0.2, 0.8]])
        assert reward_div(state) == pytest.approx(0.0, abs=1e-15)


def test_aggregate_examples():
    state = RewardState(RewardConfig(("cert",), window=10))
    for t in range(30):
        r, b = aggregate_reward({"cert": 0.3}, state)
        assert r == 0.5
    assert b == pytest.approx(0.5)

    state = RewardState(RewardConfig(("cert", "div"), window=10))
    aggregate_reward({"cert": 0.0, "div": 0.0}, state)
    aggregate_reward({"cert": 2.0, "div": 4.0}, state)
    r, b = aggregate_reward({"cert": 1.0, "div": 2.0}, state)
    assert r == pytest.approx(1.0)
    assert b == pytest.approx((1.0 + 2.0) / 2)

    state = RewardState(RewardConfig(("loss",)))
    aggregate_reward({"loss": 1.0}, state)
    aggregate_reward({"loss": 2.0}, state)
    r, _ = aggregate_reward({"loss": 0.5}, state)
    assert r == 0.0 and state.lo["loss"] == 0.5


def test_baseline_window():
    state = RewardState(RewardConfig(("cert",), window=2))
    assert aggregate_reward({"cert": 0.0}, state)[1] == 0.0
    vals = [aggregate_reward({"cert": c}, state) for c in (1.0, 0.0, 1.0)]
    # rescaled stream: 0.5, 1, 0, 1 ; baseline = mean of the previous two
    assert [b for _, b in vals] == [0.5, 0.75, 0.5]


def test_reward_config_validates():
    with pytest.raises(ValueError):
        RewardConfig(())
    with pytest.raises(ValueError):
        RewardConfig(("cert",), window=0)
    with pytest.raises(ValueError):
        RewardConfig(("bogus",))


probs = st.integers(2, 10).flatmap(
    lambda k: hnp.arrays(np.float64, k, elements=st.floats(0, 1)).filter(lambda v: v.sum() > 1e-6).map(lambda v: v / v.sum())
)


@given(probs)
def test_cert_uncert_sum_to_one(p):
    c = reward_cert(p)
    assert 0 <= c <= 1
    assert reward_cert(p) + reward_uncert(p) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=40),
       st.integers(1, 5))
def test_aggregate_bounds(stream, window):
    names = ("cert", "div", "loss", "uncert")
    state = RewardState(RewardConfig(names, window=window))
    for vals in stream:
        r, b = aggregate_reward(dict(zip(names, vals)), state)
        assert 0 <= r <= 4 and 0 <= b <= 4
        assert len(state.recent) <= window
        assert all(state.lo[n] <= state.hi[n] for n in names)


@pytest.mark.parametrize("window", [1, 5, 10, 50])
def test_concentration_insensitive_to_window(window):
    tree = PolicyTree.flat([str(i) for i in range(5)])
    state = RewardState(RewardConfig(("cert",), window=window))
    rng = np.random.default_rng(0)
    for _ in range(2000):
        z, path = sample_action(tree, rng)
        r, b = aggregate_reward({"cert": 1.0 if z == 3 else 0.0}, state)
        update_policy(tree, path, r, b)
    assert action_probs(tree.root)[3] > 0.9
