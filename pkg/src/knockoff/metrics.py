"""Accuracy metrics computed on the victim's held-out test set."""

from __future__ import annotations

import numpy as np

from .numerics import Mlp, predict_labels


def top1_accuracy(model: Mlp, x, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    return float((predict_labels(model, x) == labels).mean())


def per_class_accuracy(model: Mlp, x, labels, n_classes: int) -> np.ndarray:
    """Accuracy per class; NaN for classes absent from ``labels``."""
    labels = np.asarray(labels)
    pred = predict_labels(model, x)
    out = np.full(n_classes, np.nan)
    for k in range(n_classes):
        sel = labels == k
        if sel.any():
            out[k] = (pred[sel] == k).mean()
    return out


def seen_classes(outputs, n_classes: int) -> np.ndarray:
    """Class k is seen iff some transfer-set output has its argmax at k."""
    seen = np.zeros(n_classes, dtype=bool)
    outputs = np.asarray(outputs)
    if outputs.size:
        seen[np.unique(outputs.argmax(axis=1))] = True
    return seen


def seen_unseen_report(model: Mlp, x, labels, outputs, n_classes: int) -> dict:
    """Mean per-class accuracy over seen and unseen classes.

    An empty group maps to ``None`` rather than 0.
    """
    acc = per_class_accuracy(model, x, labels, n_classes)
    seen = seen_classes(outputs, n_classes)
    report = {}
    for group, mask in (("seen", seen), ("unseen", ~seen)):
        vals = acc[mask & ~np.isnan(acc)]
        report[group] = float(vals.mean()) if vals.size else None
    report["seen_classes"] = np.flatnonzero(seen).tolist()
    return report
