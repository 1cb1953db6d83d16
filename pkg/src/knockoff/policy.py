"""Hierarchical gradient-bandit policy and the reward signals that drive it.

Each internal node of the tree holds a softmax over its children's
potentials. Drawing an action walks root to leaf; learning applies the
gradient-bandit rule at every level of the walked path.
"""

from __future__ import annotations

import bisect
import collections
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .datapool import HierarchyNode, flat_hierarchy
from .numerics import soft_ce_loss

REWARDS = ("cert", "div", "loss", "uncert")


@dataclass(eq=False)
class PolicyNode:
    name: str
    children: list["PolicyNode"] = field(default_factory=list)
    z: int | None = None
    H: float = 0.0
    N: int = 0
    # masked nodes have no samples left below them and are never drawn
    masked: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.z is not None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


class PolicyTree:
    def __init__(self, hierarchy: HierarchyNode, flat_mode: bool = False):
        if flat_mode:
            leaves = _leaf_names(hierarchy)
            hierarchy = HierarchyNode(hierarchy.name, [HierarchyNode(n, z=z) for z, n in leaves])
        self.root = _build(hierarchy)
        self.flat_mode = flat_mode
        self._leaf = {n.z: n for n in self.root.walk() if n.is_leaf}
        self._parent = {id(c): n for n in self.root.walk() for c in n.children}

    @classmethod
    def flat(cls, z_names) -> "PolicyTree":
        return cls(flat_hierarchy(z_names), flat_mode=True)

    @property
    def exhausted(self) -> bool:
        return self.root.masked

    def leaf(self, z: int) -> PolicyNode:
        return self._leaf[z]

    def mask_leaf(self, z: int) -> None:
        """Remove ``z`` from play; ancestors with no live children follow."""
        node = self._leaf[z]
        node.masked = True
        while id(node) in self._parent:
            node = self._parent[id(node)]
            if all(c.masked for c in node.children):
                node.masked = True
            else:
                break


def _leaf_names(h: HierarchyNode):
    if h.is_leaf:
        return [(h.z, h.name)]
    return sorted((p for c in h.children for p in _leaf_names(c)), key=lambda t: t[0])


def _build(h: HierarchyNode) -> PolicyNode:
    if h.is_leaf:
        return PolicyNode(h.name, z=h.z)
    return PolicyNode(h.name, [_build(c) for c in h.children])


def _probs(node: PolicyNode) -> list[float]:
    # plain floats: children lists are short and this runs every step
    live = [c.H for c in node.children if not c.masked]
    if not live:
        return [0.0] * len(node.children)
    top = max(live)
    e = [0.0 if c.masked else math.exp(c.H - top) for c in node.children]
    total = sum(e)
    return [v / total for v in e]


def action_probs(node: PolicyNode) -> np.ndarray:
    """Softmax of the children's potentials; masked children get 0."""
    if node.is_leaf or not node.children:
        raise ValueError("action_probs needs an internal node")
    return np.array(_probs(node))


def _draw(probs: list[float], rng: np.random.Generator) -> int:
    cdf = list(itertools.accumulate(probs))
    # bisect_right never lands on a zero-probability entry
    i = bisect.bisect_right(cdf, rng.random() * cdf[-1])
    last = max(j for j, p in enumerate(probs) if p > 0.0)
    return min(i, last)


def sample_action(tree: PolicyTree, rng: np.random.Generator):
    """Draw a leaf level by level. Returns ``(z, path)`` where ``path`` is a
    list of ``(node, chosen_child_index)`` pairs from the root down."""
    if tree.exhausted:
        raise ValueError("every action is masked")
    node = tree.root
    path = []
    while not node.is_leaf:
        i = _draw(_probs(node), rng)
        path.append((node, i))
        node = node.children[i]
    return node.z, path


def update_policy(tree: PolicyTree, path, reward: float, baseline: float) -> None:
    """Gradient-bandit step at every level of ``path``.

    The chosen child moves by ``alpha * adv * (1 - pi)``, each sibling by
    ``-alpha * adv * pi``, with ``alpha = 1 / N(chosen)`` counted after this
    visit and ``pi`` taken before the update.
    """
    if not path or path[0][0] is not tree.root:
        raise ValueError("path does not start at the tree root")
    for (node, i), nxt in zip(path, path[1:] + [None]):
        if not 0 <= i < len(node.children):
            raise ValueError("path index out of range")
        if nxt is not None and nxt[0] is not node.children[i]:
            raise ValueError("path is not a root-to-leaf walk of this tree")
    if not path[-1][0].children[path[-1][1]].is_leaf:
        raise ValueError("path does not end at a leaf")

    adv = reward - baseline
    for node, i in path:
        pi = _probs(node)
        chosen = node.children[i]
        chosen.N += 1
        step = adv / chosen.N
        for j, c in enumerate(node.children):
            if j != i and pi[j] > 0.0:
                c.H -= step * pi[j]
        chosen.H += step * (1.0 - pi[i])


def leaf_probabilities(tree: PolicyTree) -> dict[int, float]:
    """Probability of drawing each leaf (product of probabilities on its path)."""
    out = {}

    def rec(node, p):
        if node.is_leaf:
            out[node.z] = p
            return
        for c, q in zip(node.children, action_probs(node) if not node.masked else np.zeros(len(node.children))):
            rec(c, p * q)

    rec(tree.root, 1.0)
    return out


def policy_snapshot(tree: PolicyTree, z_names=None) -> list[dict]:
    """One record per leaf: label id, name, draw probability, visit count."""
    probs = leaf_probabilities(tree)
    rows = []
    for z in sorted(probs):
        leaf = tree.leaf(z)
        rows.append({
            "z": z,
            "name": z_names[z] if z_names is not None else leaf.name,
            "prob": probs[z],
            "visits": leaf.N,
        })
    return rows


# --- rewards --------------------------------------------------------------


def _top2(posterior):
    p = np.asarray(posterior, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("margin rewards need K >= 2")
    s = np.sort(p, axis=-1)
    return s[..., -1], s[..., -2]


def reward_cert(posterior):
    """Margin between the two largest probabilities (row-wise for batches)."""
    a, b = _top2(posterior)
    return a - b if np.ndim(a) else float(a - b)


def reward_uncert(posterior):
    return 1.0 - reward_cert(posterior)


def reward_loss(victim_posterior, knockoff_posterior) -> float:
    return soft_ce_loss(victim_posterior, knockoff_posterior)


@dataclass(frozen=True)
class RewardConfig:
    rewards: tuple[str, ...] = ("cert",)
    window: int = 10

    def __post_init__(self):
        if not self.rewards:
            raise ValueError("enable at least one reward")
        bad = set(self.rewards) - set(REWARDS)
        if bad:
            raise ValueError(f"unknown rewards {sorted(bad)}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


class RewardState:
    """Running statistics for rescaling, the baseline and the diversity reward."""

    def __init__(self, cfg: RewardConfig, n_classes: int | None = None):
        self.cfg = cfg
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}
        self.recent = collections.deque(maxlen=cfg.window)
        self._sum = None if n_classes is None else np.zeros(n_classes)
        self._count = 0
        # mean posterior after each of the last window+1 steps
        self.mean_history = collections.deque(maxlen=cfg.window + 1)

    def observe_outputs(self, outputs) -> None:
        """Fold one step's blackbox outputs into the running mean posterior."""
        y = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
        if self._sum is None:
            self._sum = np.zeros(y.shape[1])
        self._sum += y.sum(axis=0)
        self._count += y.shape[0]
        self.mean_history.append(self._sum / self._count)

    @property
    def mean_posterior(self) -> np.ndarray:
        return self.mean_history[-1]

    @property
    def lagged_mean_posterior(self) -> np.ndarray:
        if len(self.mean_history) <= self.cfg.window:
            return self.mean_history[-1]
        return self.mean_history[0]

    def rescale(self, name: str, value: float) -> float:
        self.lo[name] = min(self.lo.get(name, value), value)
        self.hi[name] = max(self.hi.get(name, value), value)
        lo, hi = self.lo[name], self.hi[name]
        return 0.5 if hi == lo else (value - lo) / (hi - lo)


def reward_div(state: RewardState) -> float:
    if not state.mean_history:
        return 0.0
    return float(np.maximum(0.0, state.mean_posterior - state.lagged_mean_posterior).sum())


def aggregate_reward(raw: dict[str, float], state: RewardState) -> tuple[float, float]:
    """Rescale each enabled reward to [0, 1] by its running range and sum.

    Returns ``(r_t, baseline)``, the baseline being the mean of the previous
    ``window`` aggregated rewards (0 before any).
    """
    r = 0.0
    for name in state.cfg.rewards:
        r += state.rescale(name, float(raw[name]))
    baseline = sum(state.recent) / len(state.recent) if state.recent else 0.0
    state.recent.append(r)
    return r, baseline
