"""Feedforward classifier, soft-label cross-entropy, and SGD with momentum.

Victim and knockoff share the same :class:`Mlp` representation. Everything is
float64 numpy; batches are row-major ``(n, d_in)`` arrays.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12
MODEL_FORMAT_VERSION = 1
_ACTIVATIONS = ("relu",)


class TrainingFailure(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""

    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


def softmax(logits):
    """Stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def soft_ce_loss(target, predicted) -> float:
    """Cross-entropy of ``predicted`` against a soft ``target``.

    The target need not be normalized (truncated blackbox outputs are used as
    per-class weights). ``0 * log 0`` is taken as 0.
    """
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(predicted, dtype=np.float64)
    if t.shape != q.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {q.shape}")
    return float(-(t * np.log(np.maximum(q, LOG_CLAMP))).sum())


def batch_soft_ce(targets, predicted) -> np.ndarray:
    """Row-wise :func:`soft_ce_loss` for ``(n, K)`` arrays."""
    t = np.asarray(targets, dtype=np.float64)
    q = np.asarray(predicted, dtype=np.float64)
    if t.shape != q.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {q.shape}")
    return -(t * np.log(np.maximum(q, LOG_CLAMP))).sum(axis=-1)


@dataclass
class Mlp:
    """ReLU multilayer perceptron with a softmax output.

    ``weights[i]`` has shape ``(layer_dims[i+1], layer_dims[i])``.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected {shape}, got {w.shape}/{b.shape}")

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases)

    @classmethod
    def zeros(cls, layer_dims) -> "Mlp":
        return cls(
            list(layer_dims),
            [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
            [np.zeros(o) for o in layer_dims[1:]],
        )

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def _check_input(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != model d_in {model.d_in}")
    return x, single


def _forward_cache(model: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def logits(model: Mlp, x) -> np.ndarray:
    x, single = _check_input(model, x)
    out = _forward_cache(model, x)[-1]
    return out[0] if single else out


def forward(model: Mlp, x) -> np.ndarray:
    """Posterior for one sample ``(d_in,)`` or a batch ``(n, d_in)``."""
    return softmax(logits(model, x))


def backward(model: Mlp, x, target, sample_weights=None):
    """Loss and gradients of the (weighted) mean soft cross-entropy.

    ``x`` is one sample or a batch; ``target`` matches it row for row.
    Per-sample weights are normalized by their sum, so weighting only changes
    the relative contribution of samples. Returns ``(loss, grads)`` with
    ``grads`` ordered like :meth:`Mlp.params`.
    """
    x, single = _check_input(model, x)
    t = np.asarray(target, dtype=np.float64)
    if single:
        t = t[None, :]
    if t.shape != (x.shape[0], model.n_classes):
        raise ValueError(f"target shape {t.shape} does not match ({x.shape[0]}, {model.n_classes})")
    n = x.shape[0]
    if sample_weights is None:
        sw = np.full(n, 1.0 / n)
    else:
        sw = np.asarray(sample_weights, dtype=np.float64)
        sw = sw / sw.sum()

    acts = _forward_cache(model, x)
    probs = softmax(acts[-1])
    loss = float(sw @ batch_soft_ce(t, probs))

    # d/dz of -sum_k t_k log softmax(z)_k is p * sum(t) - t, also for unnormalized t
    delta = (probs * t.sum(axis=1, keepdims=True) - t) * sw[:, None]
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (acts[i] > 0)
    return loss, [*gw, *gb]


@dataclass
class SgdMomentum:
    """Classic momentum SGD with a step learning-rate schedule.

    ``v <- m v + g``; ``theta <- theta - lr v``.
    """

    momentum: float = 0.5
    base_lr: float = 0.1
    decay_factor: float = 0.1
    decay_every: int = 60
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")

    def lr_at_epoch(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every)

    def step(self, model: Mlp, grads, lr: float) -> None:
        """Update ``model`` in place."""
        params = model.params()
        if len(grads) != len(params):
            raise ValueError("gradient count does not match model")
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            if g.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"shape mismatch {g.shape} vs {p.shape}")
            v *= self.momentum
            v += g
            p -= lr * v


def lr_at_epoch(state: SgdMomentum, epoch: int) -> float:
    return state.lr_at_epoch(epoch)


def fit(
    model: Mlp,
    x: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    optimizer: SgdMomentum,
    batch_size: int,
    rng: np.random.Generator,
    class_weights: np.ndarray | None = None,
) -> list[float]:
    """Minibatch training loop shared by victim and knockoff.

    ``class_weights`` (indexed by argmax of the target) reweight samples.
    Returns the mean loss of every epoch.
    """
    n = x.shape[0]
    sw_all = None
    if class_weights is not None:
        sw_all = np.asarray(class_weights)[targets.argmax(axis=1)]
    history = []
    for epoch in range(epochs):
        lr = optimizer.lr_at_epoch(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            sw = None if sw_all is None else sw_all[idx]
            loss, grads = backward(model, x[idx], targets[idx], sw)
            if not np.isfinite(loss):
                raise TrainingFailure(epoch)
            optimizer.step(model, grads, lr)
            total += loss * len(idx)
        mean = total / n
        if not np.isfinite(mean) or not all(np.isfinite(p).all() for p in model.params()):
            raise TrainingFailure(epoch)
        history.append(mean)
    return history


def predict_labels(model: Mlp, x) -> np.ndarray:
    # argmax returns the smallest index on ties
    return logits(model, np.atleast_2d(x)).argmax(axis=1)


def save_model(model: Mlp, path) -> None:
    """Write ``model`` as a versioned ``.npz`` archive (exact round-trip)."""
    header = {
        "format": "knockoff-mlp",
        "version": MODEL_FORMAT_VERSION,
        "layer_dims": model.layer_dims,
        "activation": model.activation,
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    # np.savez stamps entries with the wall clock; a fixed timestamp keeps
    # identical models byte-identical on disk
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> Mlp:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != "knockoff-mlp":
            raise ValueError(f"{path}: not a model file")
        if header["version"] != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model version {header['version']}")
        n = len(header["layer_dims"]) - 1
        weights = [data[f"w{i}"].astype(np.float64) for i in range(n)]
        biases = [data[f"b{i}"].astype(np.float64) for i in range(n)]
    return Mlp(header["layer_dims"], weights, biases, header["activation"])
