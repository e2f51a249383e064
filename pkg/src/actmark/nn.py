"""Minimal deterministic dense-network engine.

Parameters are stored as float32. Every forward/backward computation is
carried out in float64 and the SGD update is rounded back to the storage
dtype, so reductions accumulate in 64 bits and a float64 model can be used
for exact finite-difference checks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import InputError, NumericError, ShapeError

CALC = np.float64


@dataclass
class MLP:
    """Fully connected ReLU network; weights[i] has shape (dims[i], dims[i+1])."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input width {w.shape[0]} does not chain")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def hidden_index(self, layer: int) -> int:
        """Normalise a (possibly negative) hidden-layer ordinal."""
        idx = layer + self.n_hidden if layer < 0 else layer
        if not 0 <= idx < self.n_hidden:
            raise InputError(f"layer {layer} is not a hidden layer of a {self.layer_dims} network")
        return idx

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MLP":
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def predict(self, x, batch_size: int = 2048) -> np.ndarray:
        out = [forward(self, x[i:i + batch_size]).logits.argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def activations(self, x, layer: int, batch_size: int = 2048) -> np.ndarray:
        idx = self.hidden_index(layer)
        out = [forward(self, x[i:i + batch_size]).hidden[idx]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.layer_dims[idx + 1]))

    def equals(self, other: "MLP") -> bool:
        """Bitwise equality of every parameter array."""
        if self.layer_dims != other.layer_dims:
            return False
        pairs = zip(self.weights + self.biases, other.weights + other.biases)
        return all(a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in pairs)


def init_mlp(layer_dims: Sequence[int], seed: int, dtype=np.float32) -> MLP:
    """Glorot-uniform weights, zero biases."""
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise InputError(f"invalid layer dims {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MLP(weights, biases)


@dataclass
class Snapshot:
    """Activations captured by one forward pass.

    ``hidden[l]`` is the post-ReLU output of hidden layer ``l``; ``pre`` holds
    the pre-activations of every layer, the last entry being the logits.
    """

    inputs: np.ndarray
    pre: list
    hidden: list

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def layers(self) -> list:
        return self.hidden + [self.logits]


def forward(model: MLP, batch) -> Snapshot:
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ShapeError(f"batch shape {x.shape} does not match input width {model.layer_dims[0]}")
    a = x.astype(CALC, copy=False)
    pre, hidden = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.astype(CALC, copy=False) + b.astype(CALC, copy=False)
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            hidden.append(a)
    return Snapshot(x, pre, hidden)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=CALC)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} do not match labels {y.shape}")
    n, c = z.shape
    if n == 0:
        raise InputError("empty batch")
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = -log_p[rows, y].mean()
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


loss0_and_grad = softmax_cross_entropy


@dataclass
class Gradients:
    weights: list
    biases: list


def backward(model: MLP, snap: Snapshot, dlogits, extra_grads=None) -> Gradients:
    """Backpropagate ``dlogits`` plus optional additive activation gradients.

    ``extra_grads`` maps a hidden-layer ordinal to a gradient with the shape of
    that layer's post-activation output; it is added before the ReLU mask.
    """
    extra = {model.hidden_index(k): np.asarray(v, dtype=CALC)
             for k, v in (extra_grads or {}).items()}
    for idx, g in extra.items():
        if g.shape != snap.hidden[idx].shape:
            raise ShapeError(f"extra gradient for layer {idx} has shape {g.shape}, "
                             f"expected {snap.hidden[idx].shape}")
    delta = np.asarray(dlogits, dtype=CALC)
    if delta.shape != snap.logits.shape:
        raise ShapeError(f"dlogits shape {delta.shape} != logits {snap.logits.shape}")
    n_layers = len(model.weights)
    dw, db = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        a_in = snap.inputs.astype(CALC, copy=False) if i == 0 else snap.hidden[i - 1]
        dw[i] = a_in.T @ delta
        db[i] = delta.sum(axis=0)
        if not (np.isfinite(dw[i]).all() and np.isfinite(db[i]).all()):
            raise NumericError(f"non-finite gradient in layer {i}", layer=i)
        if i == 0:
            break
        d_act = delta @ model.weights[i].astype(CALC, copy=False).T
        if i - 1 in extra:
            d_act = d_act + extra[i - 1]
        delta = d_act * (snap.pre[i - 1] > 0)
    return Gradients(dw, db)


def sgd_step(model: MLP, grads: Gradients, lr: float, masks=None) -> MLP:
    """In-place plain SGD update; masked weights are held at exactly zero."""
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        new_w = w.astype(CALC) - lr * grads.weights[i]
        if masks is not None:
            new_w *= masks[i]
        model.weights[i] = new_w.astype(w.dtype)
        model.biases[i] = (b.astype(CALC) - lr * grads.biases[i]).astype(b.dtype)
    return model


def backward_and_step(model, snap, dlogits, extra_grads=None, lr=0.01, masks=None):
    return sgd_step(model, backward(model, snap, dlogits, extra_grads), lr, masks)


class AdditiveLoss(Protocol):
    """Extra training term acting on one hidden layer's activations.

    ``__call__`` returns named loss values and the gradient with respect to the
    activation; ``step`` applies the hook's own pending parameter update.
    """

    layer: int

    def __call__(self, activation: np.ndarray, labels: np.ndarray) -> tuple[dict, np.ndarray]: ...

    def step(self, lr: float) -> None: ...


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    lr_decay_factor: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** epoch

    @property
    def final_lr(self) -> float:
        return self.lr_at(max(self.epochs - 1, 0))

    def replace(self, **changes) -> "TrainConfig":
        new = copy.copy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.__post_init__()
        return new


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class EpochStats:
    loss0: float = 0.0
    extra: dict = field(default_factory=dict)
    correct: int = 0
    count: int = 0

    def as_row(self, epoch, lr):
        row = {"epoch": epoch, "lr": lr, "loss0": self.loss0 / max(self.count, 1)}
        row.update({k: v / max(self.count, 1) for k, v in self.extra.items()})
        row["accuracy"] = self.correct / max(self.count, 1)
        return row


def run_epoch(model: MLP, x, y, lr: float, batch_size: int, order, hooks=(), masks=None) -> EpochStats:
    """One pass of minibatch SGD over ``x[order]``; mutates ``model`` and hooks."""
    stats = EpochStats()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        xb, yb = x[idx], y[idx]
        snap = forward(model, xb)
        loss, dlogits = softmax_cross_entropy(snap.logits, yb)
        extra = {}
        for hook in hooks:
            layer = model.hidden_index(hook.layer)
            losses, grad = hook(snap.hidden[layer], yb)
            extra[layer] = extra[layer] + grad if layer in extra else grad
            for name, value in losses.items():
                stats.extra[name] = stats.extra.get(name, 0.0) + value * len(idx)
        backward_and_step(model, snap, dlogits, extra, lr, masks)
        for hook in hooks:
            hook.step(lr)
        stats.loss0 += loss * len(idx)
        stats.correct += int((snap.logits.argmax(axis=1) == yb).sum())
        stats.count += len(idx)
    return stats


def train(model: MLP, dataset, config: TrainConfig, hooks=(), masks=None,
          first_epoch: int = 0, on_epoch=None):
    """Epoch-shuffled minibatch SGD on a copy of ``model``.

    Returns the trained copy and a list of per-epoch metric rows. Epoch ``e``
    uses the permutation seeded by ``(config.seed, first_epoch + e)`` so a run
    split into several calls replays an uninterrupted one exactly.
    """
    x, y = dataset.inputs, dataset.labels
    if len(y) == 0:
        raise InputError("cannot train on an empty dataset")
    model = model.copy()
    history = []
    for e in range(config.epochs):
        epoch = first_epoch + e
        lr = config.lr_at(epoch)
        stats = run_epoch(model, x, y, lr, config.batch_size,
                          epoch_order(config.seed, epoch, len(y)), hooks, masks)
        history.append(stats.as_row(epoch, lr))
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, history


def accuracy(model: MLP, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float((model.predict(x) == np.asarray(y)).mean())
