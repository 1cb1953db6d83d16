"""Synthetic datasets, adversary sample pools, label hierarchies.

A "sample" is a raw feature vector. Pools keep three parallel arrays
(features, adversary labels, optional victim labels) plus the per-sample
``queried`` flags that make sampling without replacement possible.
Victim labels are simulator-side ground truth; attack code never reads them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

POOL_MAGIC = b"KOPOOL\x00\x01"
POOL_FORMAT_VERSION = 1
ROOT_NAME = "entity"


@dataclass
class HierarchyNode:
    """Node of the coarse-to-fine label tree. Leaves carry a ``z`` id."""

    name: str
    children: list["HierarchyNode"] = field(default_factory=list)
    z: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.z is not None

    def leaves(self) -> list[int]:
        if self.is_leaf:
            return [self.z]
        return [z for c in self.children for z in c.leaves()]

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"name": self.name, "z": self.z}
        return {"name": self.name, "children": [c.to_dict() for c in self.children]}

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyNode":
        if "z" in d:
            return cls(d["name"], z=int(d["z"]))
        return cls(d["name"], [cls.from_dict(c) for c in d["children"]])

    def shifted(self, offset: int) -> "HierarchyNode":
        if self.is_leaf:
            return HierarchyNode(self.name, z=self.z + offset)
        return HierarchyNode(self.name, [c.shifted(offset) for c in self.children])


def flat_hierarchy(z_names) -> HierarchyNode:
    return HierarchyNode(ROOT_NAME, [HierarchyNode(n, z=i) for i, n in enumerate(z_names)])


def validate_hierarchy(root: HierarchyNode, n_labels: int) -> None:
    if root.is_leaf:
        raise ValueError("hierarchy root must not be a leaf")

    def check(node):
        if not node.is_leaf and not node.children:
            raise ValueError(f"internal node {node.name!r} has no children")
        for c in node.children:
            check(c)

    check(root)
    leaves = root.leaves()
    if sorted(leaves) != list(range(n_labels)):
        raise ValueError("hierarchy leaves do not partition the label set")


def save_hierarchy(root: HierarchyNode, path) -> None:
    with open(path, "w") as fh:
        json.dump(root.to_dict(), fh, indent=1)
        fh.write("\n")


def load_hierarchy(path) -> HierarchyNode:
    with open(path) as fh:
        return HierarchyNode.from_dict(json.load(fh))


@dataclass
class SamplePool:
    features: np.ndarray
    adversary_labels: np.ndarray
    z_names: list[str]
    victim_labels: np.ndarray | None = None
    queried: np.ndarray | None = None
    hierarchy: HierarchyNode | None = None
    name: str = "pool"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        n = self.features.shape[0]
        self.adversary_labels = np.asarray(self.adversary_labels, dtype=np.int64)
        if self.victim_labels is None:
            self.victim_labels = np.full(n, -1, dtype=np.int64)
        self.victim_labels = np.asarray(self.victim_labels, dtype=np.int64)
        if self.queried is None:
            self.queried = np.zeros(n, dtype=bool)
        self.z_names = list(self.z_names)
        if self.adversary_labels.shape != (n,) or self.victim_labels.shape != (n,) or self.queried.shape != (n,):
            raise ValueError("per-sample arrays must match the number of samples")
        if n and (self.adversary_labels.min() < 0 or self.adversary_labels.max() >= len(self.z_names)):
            raise ValueError("adversary label out of range")
        if self.hierarchy is None:
            self.hierarchy = flat_hierarchy(self.z_names)
        validate_hierarchy(self.hierarchy, len(self.z_names))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return len(self.z_names)

    def copy(self) -> "SamplePool":
        return SamplePool(
            self.features.copy(),
            self.adversary_labels.copy(),
            list(self.z_names),
            self.victim_labels.copy(),
            self.queried.copy(),
            HierarchyNode.from_dict(self.hierarchy.to_dict()),
            self.name,
        )

    def subset(self, idx) -> "SamplePool":
        """Samples at ``idx``; label ids and hierarchy are kept as they are."""
        idx = np.asarray(idx, dtype=np.int64)
        return SamplePool(
            self.features[idx],
            self.adversary_labels[idx],
            list(self.z_names),
            self.victim_labels[idx],
            self.queried[idx],
            HierarchyNode.from_dict(self.hierarchy.to_dict()),
            self.name,
        )

    def unqueried(self) -> np.ndarray:
        return np.flatnonzero(~self.queried)


# --- synthetic generation -------------------------------------------------


@dataclass
class DatasetSpec:
    """Class-conditional Gaussian mixture.

    ``means`` is ``(K, d)`` or ``(K, n_modes, d)``; a class draws each sample
    from one of its modes uniformly, then adds isotropic noise of
    ``scale``.
    """

    means: np.ndarray
    scale: float | list[float] = 1.0
    n_train: int | list[int] = 100
    n_test: int | list[int] = 100
    seed: int = 0
    class_names: list[str] | None = None

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 2:
            m = m[:, None, :]
        if m.ndim != 3:
            raise ValueError("means must be (K, d) or (K, modes, d)")
        self.means = m
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        for name, val in (("n_train", self.n_train), ("n_test", self.n_test)):
            counts = self._per_class(val)
            if min(counts) < 1:
                raise ValueError(f"{name} must be >= 1 per class")
        if min(self._per_class(self.scale)) <= 0:
            raise ValueError("scale must be positive")
        if not np.isfinite(m).all():
            raise ValueError("means must be finite")
        if self.class_names is None:
            self.class_names = [f"class{k}" for k in range(self.n_classes)]
        if len(self.class_names) != self.n_classes:
            raise ValueError("class_names length must equal K")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def d_in(self) -> int:
        return self.means.shape[2]

    def _per_class(self, val):
        if np.isscalar(val):
            return [val] * self.n_classes
        val = list(val)
        if len(val) != self.n_classes:
            raise ValueError("per-class list length must equal K")
        return val


def _sample_mixture(means, scale, counts, rng):
    xs, ys = [], []
    for k, n in enumerate(counts):
        modes = rng.integers(0, means.shape[1], size=n)
        noise = rng.standard_normal((n, means.shape[2]))
        xs.append(means[k][modes] + scale[k] * noise)
        ys.append(np.full(n, k, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def gen_synthetic(spec: DatasetSpec):
    """Draw victim train and test sets. Returns ``(train, test, description)``.

    Both sets are pools whose adversary labels equal the victim labels, so
    the train set can serve directly as an adversary source (the P_A = P_V
    and closed-world cases).
    """
    rng = np.random.default_rng(spec.seed)
    scale = spec._per_class(spec.scale)
    out = []
    for counts in (spec._per_class(spec.n_train), spec._per_class(spec.n_test)):
        x, y = _sample_mixture(spec.means, scale, counts, rng)
        out.append(SamplePool(x, y, spec.class_names, victim_labels=y, name="victim"))
    description = {
        "d_in": spec.d_in,
        "K": spec.n_classes,
        "modes": spec.means.shape[1],
        "n_train": len(out[0]),
        "n_test": len(out[1]),
        "seed": spec.seed,
    }
    return out[0], out[1], description


def random_means(n_classes, n_modes, d_in, separation, rng) -> np.ndarray:
    """Mode centres with expected norm ``separation``."""
    return rng.standard_normal((n_classes, n_modes, d_in)) * separation / math.sqrt(d_in)


def random_rotation(d_in, angle, rng) -> np.ndarray:
    """Rotation by ``angle`` radians within a random 2-plane."""
    q, _ = np.linalg.qr(rng.standard_normal((d_in, 2)))
    u, v = q[:, 0], q[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return (
        np.eye(d_in)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )


def analog_pool(spec: DatasetSpec, classes, n_per_label, rng, *, shift=0.5, angle=0.3, name="analog") -> SamplePool:
    """Pool of look-alike samples for ``classes``: the class mixtures,
    rotated and shifted, drawn fresh. Labels reuse the victim class names."""
    d = spec.d_in
    rot = random_rotation(d, angle, rng)
    offset = rng.standard_normal(d) * shift / math.sqrt(d)
    means = spec.means[list(classes)] @ rot.T + offset
    scale = [spec._per_class(spec.scale)[k] for k in classes]
    x, y = _sample_mixture(means, scale, [n_per_label] * len(classes), rng)
    names = [spec.class_names[k] for k in classes]
    return SamplePool(x, y, names, victim_labels=np.asarray(classes)[y], name=name)


def distractor_pool(n_labels, counts, d_in, rng, *, centre_scale, label_scale, spread, prefix) -> SamplePool:
    """Labels unrelated to the victim's task.

    The pool has one centre of norm about ``centre_scale``; each label is a
    Gaussian of width ``spread`` around a point ``label_scale`` away from it.
    """
    if np.isscalar(counts):
        counts = [int(counts)] * n_labels
    centre = rng.standard_normal(d_in) * centre_scale / math.sqrt(d_in)
    xs, ys = [], []
    for j, n in enumerate(counts):
        mu = centre + rng.standard_normal(d_in) * label_scale / math.sqrt(d_in)
        xs.append(mu + spread * rng.standard_normal((n, d_in)))
        ys.append(np.full(n, j, dtype=np.int64))
    names = [f"{prefix}/{j}" for j in range(n_labels)]
    return SamplePool(np.vstack(xs), np.concatenate(ys), names, name=prefix)


def split_counts(total, parts) -> list[int]:
    base, extra = divmod(int(total), int(parts))
    return [base + (1 if i < extra else 0) for i in range(parts)]


# --- universe assembly ----------------------------------------------------


def build_universe(pools, names=None) -> SamplePool:
    """Concatenate source pools into one universe.

    Label ids are offset per source so they stay disjoint (two sources may
    share a label *name*). The hierarchy gets one coarse node per source,
    holding that source's own tree.
    """
    pools = list(pools)
    if not pools:
        raise ValueError("no pools given")
    d = pools[0].d_in
    if any(p.d_in != d for p in pools):
        raise ValueError("pools have different feature dimensions")
    names = names or [p.name for p in pools]
    feats, adv, vic, queried, z_names, coarse = [], [], [], [], [], []
    offset = 0
    for pool, pname in zip(pools, names):
        feats.append(pool.features)
        adv.append(pool.adversary_labels + offset)
        vic.append(pool.victim_labels)
        queried.append(pool.queried)
        z_names.extend(pool.z_names)
        sub = pool.hierarchy.shifted(offset)
        coarse.append(HierarchyNode(pname, sub.children))
        offset += pool.n_labels
    return SamplePool(
        np.vstack(feats),
        np.concatenate(adv),
        z_names,
        np.concatenate(vic),
        np.concatenate(queried),
        HierarchyNode(ROOT_NAME, coarse),
        name="universe",
    )


def label_overlap(victim_names, adversary_names) -> float:
    """Percentage of victim classes that also appear among adversary labels."""
    k = set(victim_names)
    if not k:
        raise ValueError("victim label set is empty")
    return 100.0 * len(k & set(adversary_names)) / len(k)


@dataclass(frozen=True)
class OverlapConfig:
    tau_d: float = 1.0
    tau_k: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_d", "tau_k"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


def _keep_count(frac, n) -> int:
    return int(math.floor(frac * n + 0.5))


def _row_keys(x: np.ndarray):
    return [r.tobytes() for r in np.ascontiguousarray(x)]


def semi_open_filter(pool: SamplePool, victim_train: SamplePool, cfg: OverlapConfig) -> SamplePool:
    """Reduce the pool's overlap with the victim's data.

    Keeps a ``tau_k`` fraction of the labels whose names are victim class
    names (dropping every sample of the others), then a ``tau_d`` fraction of
    the remaining samples that are identical to victim training samples.
    Both choices are seeded prefixes of a permutation, so a smaller fraction
    always keeps a subset of what a larger one keeps. Label ids and the
    hierarchy are left untouched.
    """
    rng = np.random.default_rng(cfg.seed)
    victim_names = set(victim_train.z_names)
    overlap_labels = [z for z, n in enumerate(pool.z_names) if n in victim_names]
    order = rng.permutation(len(overlap_labels))
    kept_labels = {overlap_labels[i] for i in order[:_keep_count(cfg.tau_k, len(overlap_labels))]}
    dropped_labels = set(overlap_labels) - kept_labels
    keep = ~np.isin(pool.adversary_labels, sorted(dropped_labels))

    train_keys = set(_row_keys(victim_train.features))
    pool_keys = _row_keys(pool.features)
    coincide = np.array([k in train_keys for k in pool_keys], dtype=bool)
    candidates = np.flatnonzero(coincide & keep)
    perm = rng.permutation(len(candidates))
    n_keep = _keep_count(cfg.tau_d, len(candidates))
    drop_images = candidates[np.sort(perm[n_keep:])]
    keep[drop_images] = False
    return pool.subset(np.flatnonzero(keep))


# --- clustering and hierarchy ---------------------------------------------


def agglomerative_cluster(points, n_clusters: int) -> np.ndarray:
    """Average-linkage agglomerative clustering on Euclidean distance.

    Merges the closest pair of clusters until ``n_clusters`` remain. A
    cluster is identified by its smallest member index; among equally close
    pairs the lexicographically smallest pair is merged. Returned labels
    number clusters by their smallest member.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) array of points")
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in [1, {n}]")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    size = np.ones(n)
    owner = np.arange(n)
    active = np.ones(n, dtype=bool)
    for _ in range(n - n_clusters):
        live = upper & active[:, None] & active[None, :]
        # row-major argmin gives the smallest (i, j) among ties
        i, j = divmod(int(np.argmin(np.where(live, dist, np.inf))), n)
        # Lance-Williams update for average linkage
        merged = (size[i] * dist[i] + size[j] * dist[j]) / (size[i] + size[j])
        dist[i, :] = merged
        dist[:, i] = merged
        size[i] += size[j]
        active[j] = False
        owner[owner == j] = i
    ids = np.unique(owner)
    return np.searchsorted(ids, owner)


def label_means(pool: SamplePool) -> np.ndarray:
    sums = np.zeros((pool.n_labels, pool.d_in))
    np.add.at(sums, pool.adversary_labels, pool.features)
    counts = np.bincount(pool.adversary_labels, minlength=pool.n_labels)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"labels without samples: {missing[:5]}")
    return sums / counts[:, None]


def build_hierarchy(pool: SamplePool, n_coarse: int) -> HierarchyNode:
    """Two-level tree: root, ``n_coarse`` groups of labels clustered by their
    mean feature vector, then the labels as leaves."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    if n_coarse > pool.n_labels or n_coarse < 1:
        raise ValueError(f"n_coarse must be in [1, {pool.n_labels}]")
    groups = agglomerative_cluster(label_means(pool), n_coarse)
    coarse = []
    for g in range(n_coarse):
        leaves = [HierarchyNode(pool.z_names[z], z=int(z)) for z in np.flatnonzero(groups == g)]
        coarse.append(HierarchyNode(f"group{g}", leaves))
    root = HierarchyNode(ROOT_NAME, coarse)
    validate_hierarchy(root, pool.n_labels)
    return root


# --- file format ----------------------------------------------------------


def _record_dtype(d_in, n_outputs):
    fields = [("x", "<f8", (d_in,)), ("victim_label", "<i4"), ("adversary_label", "<u4")]
    if n_outputs:
        fields.append(("output", "<f8", (n_outputs,)))
    return np.dtype(fields)


def write_pool(path, pool: SamplePool, n_classes: int, outputs: np.ndarray | None = None, extra=None) -> None:
    """Binary pool file: magic, length-prefixed JSON header, fixed-width records.

    ``outputs`` appends one blackbox output vector per record (transfer sets).
    """
    n_out = 0 if outputs is None else outputs.shape[1]
    header = {
        "version": POOL_FORMAT_VERSION,
        "d_in": pool.d_in,
        "K": int(n_classes),
        "n_labels": pool.n_labels,
        "n_samples": len(pool),
        "n_outputs": n_out,
        "z_names": pool.z_names,
        "name": pool.name,
    }
    if extra:
        header["extra"] = extra
    rec = np.zeros(len(pool), dtype=_record_dtype(pool.d_in, n_out))
    rec["x"] = pool.features
    rec["victim_label"] = pool.victim_labels
    rec["adversary_label"] = pool.adversary_labels
    if n_out:
        rec["output"] = outputs
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(POOL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def read_pool(path):
    """Inverse of :func:`write_pool`. Returns ``(pool, header, outputs)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(POOL_MAGIC)] != POOL_MAGIC:
        raise ValueError(f"{path}: bad magic")
    off = len(POOL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    if header["version"] != POOL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header['version']}")
    dt = _record_dtype(header["d_in"], header["n_outputs"])
    rec = np.frombuffer(data, dtype=dt, count=header["n_samples"], offset=off)
    pool = SamplePool(
        rec["x"].astype(np.float64),
        rec["adversary_label"].astype(np.int64),
        header["z_names"],
        rec["victim_label"].astype(np.int64),
        name=header.get("name", "pool"),
    )
    outputs = rec["output"].astype(np.float64) if header["n_outputs"] else None
    return pool, header, outputs
