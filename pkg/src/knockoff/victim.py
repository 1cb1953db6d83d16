"""Victim training, output truncation defenses, and the metered blackbox."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .numerics import Mlp, SgdMomentum, fit, forward


@dataclass(frozen=True)
class DefensePolicy:
    """How the blackbox truncates its posterior before answering.

    ``kind`` is one of ``none``, ``topk``, ``rounding``, ``argmax``; ``param``
    is ``k`` for top-k and the number of decimals for rounding.
    """

    kind: str = "none"
    param: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "topk", "rounding", "argmax"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "topk" and self.param < 1:
            raise ValueError("top-k needs k >= 1")
        if self.kind == "rounding" and self.param < 0:
            raise ValueError("rounding needs r >= 0")

    @classmethod
    def parse(cls, text: str) -> "DefensePolicy":
        """``none``, ``argmax``, ``topk:2``, ``rounding:3``."""
        kind, _, param = text.partition(":")
        return cls(kind, int(param) if param else 0)

    def __str__(self):
        return self.kind if self.kind in ("none", "argmax") else f"{self.kind}:{self.param}"


def round_half_away(x: np.ndarray, decimals: int) -> np.ndarray:
    """Decimal rounding with ties away from zero, applied to the shortest
    decimal repr of each float (so 0.125 -> 0.13 and 0.127 -> 0.13)."""
    q = Decimal(1).scaleb(-decimals)
    flat = [float(Decimal(repr(float(v))).quantize(q, rounding=ROUND_HALF_UP)) for v in np.ravel(x)]
    return np.asarray(flat, dtype=np.float64).reshape(np.shape(x))


def truncate(posterior, defense: DefensePolicy) -> np.ndarray:
    """Apply ``defense`` to one posterior ``(K,)`` or a batch ``(n, K)``.

    Outputs are never renormalized.
    """
    p = np.asarray(posterior, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    K = p2.shape[1]
    if defense.kind == "none":
        out = p2.copy()
    elif defense.kind == "topk":
        if defense.param > K:
            raise ValueError(f"k={defense.param} exceeds K={K}")
        # stable sort on -p keeps the smallest indices among ties
        order = np.argsort(-p2, axis=1, kind="stable")[:, : defense.param]
        out = np.zeros_like(p2)
        rows = np.arange(p2.shape[0])[:, None]
        out[rows, order] = p2[rows, order]
    elif defense.kind == "rounding":
        out = round_half_away(p2, defense.param)
    else:
        out = np.zeros_like(p2)
        out[np.arange(p2.shape[0]), p2.argmax(axis=1)] = 1.0
    return out[0] if single else out


def class_weights(train_labels, n_classes: int | None = None) -> np.ndarray:
    """Per-class loss weights ``n_min / n_k``."""
    labels = np.asarray(train_labels, dtype=np.int64)
    K = n_classes if n_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=K)
    if (counts == 0).any():
        raise ValueError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    return counts.min() / counts


@dataclass
class VictimConfig:
    hidden: tuple[int, ...] = (64,)
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.5
    decay_factor: float = 0.1
    decay_every: int = 60
    batch_size: int = 32
    weighted: bool = False


def train_victim(train, n_classes: int, cfg: VictimConfig, rng: np.random.Generator) -> Mlp:
    """Train on one-hot targets of ``train.victim_labels``.

    With ``cfg.weighted`` the loss is reweighted by :func:`class_weights`.
    """
    x = train.features
    y = train.victim_labels
    if len(y) == 0:
        raise ValueError("empty training set")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("training labels must lie in [0, K)")
    model = Mlp.init([x.shape[1], *cfg.hidden, n_classes], rng)
    opt = SgdMomentum(cfg.momentum, cfg.lr, cfg.decay_factor, cfg.decay_every)
    weights = class_weights(y, n_classes) if cfg.weighted else None
    fit(
        model,
        x,
        np.eye(n_classes)[y],
        epochs=cfg.epochs,
        optimizer=opt,
        batch_size=cfg.batch_size,
        rng=rng,
        class_weights=weights,
    )
    return model


class VictimBlackbox:
    """Images in, (truncated) posteriors out. Counts every sample queried."""

    def __init__(self, model: Mlp, defense: DefensePolicy = DefensePolicy(), cost_per_query: float = 0.0):
        self._model = model
        self.defense = defense
        self.cost_per_query = cost_per_query
        self.query_count = 0
        if defense.kind == "topk" and defense.param > model.n_classes:
            raise ValueError(f"k={defense.param} exceeds K={model.n_classes}")

    @property
    def n_classes(self) -> int:
        return self._model.n_classes

    @property
    def d_in(self) -> int:
        return self._model.d_in

    @property
    def total_cost(self) -> float:
        return self.query_count * self.cost_per_query

    def query(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected a (n, {self.d_in}) batch, got {x.shape}")
        out = truncate(forward(self._model, x), self.defense)
        self.query_count += x.shape[0]
        return out
