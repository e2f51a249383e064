"""Hidden-layer (white-box) watermarking.

The owner's bits live in the means of a per-class Gaussian mixture fitted to
one hidden layer's activations. A private projection matrix maps the selected
class means to sigmoid scores which threshold into the bit string.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .errors import EmbeddingFailedError, InputError, ShapeError
from .nn import CALC, MLP, TrainConfig, train


@dataclass
class WhiteboxSecret:
    layer: int
    carriers: np.ndarray  # (s,) distinct class indices
    projection: np.ndarray  # (M, N) float32
    bits: np.ndarray  # (s, N) uint8
    lambda1: float = 0.01
    lambda2: float = 0.01
    n_classes: int = 10
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        self.carriers = np.asarray(self.carriers, dtype=np.int64)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if len(set(self.carriers.tolist())) != len(self.carriers):
            raise InputError("carrier classes must be distinct")
        if self.bits.shape != (len(self.carriers), self.projection.shape[1]):
            raise ShapeError(f"bits {self.bits.shape} do not match s={len(self.carriers)}, "
                             f"N={self.projection.shape[1]}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("lambda1 and lambda2 must be non-negative")

    @property
    def n_bits(self) -> int:
        return self.projection.shape[1]

    @property
    def width(self) -> int:
        return self.projection.shape[0]


def make_secret(seed: int, n_classes: int, n_carriers: int, width: int, n_bits: int,
                lambda1: float = 0.01, lambda2: float = 0.01, layer: int = -1) -> WhiteboxSecret:
    if not 1 <= n_carriers <= n_classes:
        raise InputError(f"need 1 <= s <= S, got s={n_carriers}, S={n_classes}")
    if n_bits < 1 or width < 1:
        raise InputError("N and M must be >= 1")
    rng = np.random.default_rng(seed)
    carriers = rng.choice(n_classes, size=n_carriers, replace=False)
    bits = rng.integers(0, 2, size=(n_carriers, n_bits), dtype=np.uint8)
    projection = rng.standard_normal((width, n_bits)).astype(np.float32)
    return WhiteboxSecret(layer, carriers, projection, bits, lambda1, lambda2, n_classes, seed)


def loss1_and_grads(features, labels, centers, lambda1: float, push: float = 1.0,
                   reduction: str = "mean"):
    """Mixture-separation loss: pull toward the own class mean, push from the rest.

    ``push`` weights the summed squared distances to the other centers; 1.0 is
    the plain difference of distances. That form is concave in the features
    once there are more than two classes and diverges under SGD, so training
    hooks use a smaller weight (see :class:`WatermarkLoss`). ``reduction`` is
    ``"mean"`` or ``"sum"`` over the batch. Returns ``(loss, d_features, d_centers)``.
    """
    f = np.asarray(features, dtype=CALC)
    mu = np.asarray(centers, dtype=CALC)
    y = np.asarray(labels)
    if f.ndim != 2 or mu.ndim != 2 or f.shape[1] != mu.shape[1] or y.shape != (len(f),):
        raise ShapeError(f"features {f.shape}, centers {mu.shape}, labels {y.shape} disagree")
    n, n_classes = len(f), len(mu)
    if n == 0:
        return 0.0, np.zeros_like(f), np.zeros_like(mu)
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError("label outside the range of centers")
    if reduction not in ("mean", "sum"):
        raise InputError(f"unknown reduction {reduction!r}")
    # +1 for the own class, -push for every other class
    sign = np.full((n, n_classes), -float(push))
    sign[np.arange(n), y] = 1.0
    sq_dist = (f * f).sum(1)[:, None] - 2.0 * f @ mu.T + (mu * mu).sum(1)[None, :]
    scale = lambda1 / n if reduction == "mean" else lambda1
    loss = scale * float((sign * sq_dist).sum())
    d_f = 2.0 * scale * (f * sign.sum(1)[:, None] - sign @ mu)
    d_mu = 2.0 * scale * (mu * sign.sum(0)[:, None] - sign.T @ f)
    return loss, d_f, d_mu


def project_bits(selected_centers, projection, threshold: float = 0.5):
    """Sigmoid scores of the projected centers and their hard-thresholded bits.

    Scores equal to the threshold map to 1. Bits are decided in logit space so
    that at the default threshold they depend only on the sign of the projection.
    """
    z = np.asarray(selected_centers, dtype=CALC) @ np.asarray(projection, dtype=CALC)
    bits = (z >= logit(threshold)).astype(np.uint8)
    return expit(z), bits


def loss2_and_grad(selected_centers, projection, bits, lambda2: float):
    """Binary cross-entropy (summed over all s*N bits) between scores and bits.

    Evaluated through log-sigmoid, so it stays finite without clamping the
    scores; a clamp would zero the gradient of any bit whose score is wrong by
    more than ~16 logits and leave it stuck there.
    """
    mu = np.asarray(selected_centers, dtype=CALC)
    a = np.asarray(projection, dtype=CALC)
    b = np.asarray(bits, dtype=CALC)
    if mu.shape[1] != a.shape[0] or b.shape != (mu.shape[0], a.shape[1]):
        raise ShapeError(f"centers {mu.shape}, projection {a.shape}, bits {b.shape} disagree")
    z = mu @ a
    # -[b ln s(z) + (1-b) ln(1-s(z))] = softplus(z) - b z
    loss = lambda2 * float((np.logaddexp(0.0, z) - b * z).sum())
    d_z = lambda2 * (expit(z) - b)
    return loss, d_z @ a.T


@dataclass
class ExtractionResult:
    bits: np.ndarray
    mismatch_count: int
    ber: float
    scores: np.ndarray = field(repr=False, default=None)

    def __eq__(self, other):
        return (isinstance(other, ExtractionResult) and self.mismatch_count == other.mismatch_count
                and self.ber == other.ber and np.array_equal(self.bits, other.bits))


def compare_bits(extracted, embedded) -> ExtractionResult:
    extracted = np.asarray(extracted, dtype=np.uint8)
    embedded = np.asarray(embedded, dtype=np.uint8)
    if extracted.shape != embedded.shape:
        raise ShapeError(f"bit arrays {extracted.shape} and {embedded.shape} differ")
    mismatches = int((extracted != embedded).sum())
    return ExtractionResult(extracted, mismatches, mismatches / embedded.size)


def select_key_samples(labels, carriers, seed: int, fraction: float = 0.01, min_count: int = 10):
    """Indices of the extraction key: a seeded 1% (at least ``min_count``) per carrier class."""
    rng = np.random.default_rng([seed, 1])
    keys = []
    for c in carriers:
        idx = np.flatnonzero(np.asarray(labels) == c)
        if len(idx) == 0:
            raise InputError(f"no samples of carrier class {c} in the key data")
        k = min(len(idx), max(min_count, int(round(fraction * len(idx)))))
        keys.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return keys


def carrier_means(activations, labels, carriers) -> np.ndarray:
    acts = np.asarray(activations, dtype=CALC)
    rows = []
    for c in carriers:
        mask = np.asarray(labels) == c
        if not mask.any():
            raise InputError(f"no activations for carrier class {c}")
        rows.append(acts[mask].mean(axis=0))
    return np.stack(rows)


def extract(model: MLP, dataset, secret: WhiteboxSecret, fraction: float = 0.01,
            min_count: int = 10) -> ExtractionResult:
    """Recover the bits from a model's activations on the owner's key samples."""
    layer = model.hidden_index(secret.layer)
    if model.layer_dims[layer + 1] != secret.width:
        raise ShapeError(f"layer width {model.layer_dims[layer + 1]} != projection rows {secret.width}")
    key_sets = select_key_samples(dataset.labels, secret.carriers, secret.seed, fraction, min_count)
    idx = np.concatenate(key_sets)
    acts = model.activations(dataset.inputs[idx], layer)
    return extract_from_activations(acts, dataset.labels[idx], secret)


def extract_from_activations(activations, labels, secret: WhiteboxSecret) -> ExtractionResult:
    """Extraction when the remote party returns layer activations directly."""
    means = carrier_means(activations, labels, secret.carriers)
    scores, bits = project_bits(means, secret.projection, secret.threshold)
    result = compare_bits(bits, secret.bits)
    result.scores = scores
    return result


class WatermarkLoss:
    """Training hook adding the mixture and projection losses to one layer.

    The class centers are trainable; their gradient from both losses is
    accumulated in ``__call__`` and applied by ``step`` at the model's rate.

    With ``reduction="sum"`` every sample in a batch carries its own copy of
    both terms, so the projection loss is weighted by the batch size and both
    strengths act per sample. The default ``push`` of 0 keeps only the pull
    toward the own center, which is bounded below and therefore stable.
    """

    def __init__(self, secret: WhiteboxSecret, centers, push: float = 0.0,
                 reduction: str = "sum"):
        self.secret = secret
        self.push = push
        self.reduction = reduction
        self.layer = secret.layer
        self.centers = np.asarray(centers, dtype=np.float32).copy()
        self._pending = None

    def __call__(self, activation, labels):
        s = self.secret
        loss1, d_f, d_mu = loss1_and_grads(activation, labels, self.centers, s.lambda1,
                                           self.push, self.reduction)
        weight = s.lambda2 * (len(labels) if self.reduction == "sum" else 1)
        loss2, d_sel = loss2_and_grad(self.centers[s.carriers], s.projection, s.bits, weight)
        np.add.at(d_mu, s.carriers, d_sel)
        self._pending = d_mu
        return {"loss1": loss1, "loss2": loss2}, d_f

    def step(self, lr):
        # centers model means of post-ReLU activations, so they stay in the non-negative orthant
        if self._pending is not None:
            moved = self.centers.astype(CALC) - lr * self._pending
            self.centers = np.maximum(moved, 0.0).astype(np.float32)
            self._pending = None


def class_means(model: MLP, dataset, layer: int, n_classes: int) -> np.ndarray:
    acts = model.activations(dataset.inputs, layer)
    means = np.zeros((n_classes, acts.shape[1]), dtype=CALC)
    for c in range(n_classes):
        mask = dataset.labels == c
        if mask.any():
            means[c] = acts[mask].mean(axis=0)
    return means.astype(np.float32)


def embed(model: MLP, dataset, secret: WhiteboxSecret, config: TrainConfig,
          warmup_epochs: int = 1, check: bool = True, first_epoch: int = 0,
          push: float = 0.0, reduction: str = "sum"):
    """Train ``model`` with the watermark losses added on ``secret.layer``.

    The first ``warmup_epochs`` epochs use the plain loss; the class centers are
    then initialised to the per-class activation means and trained jointly with
    the weights for the remaining epochs. Returns ``(model, centers, history)``.
    With ``check`` set, a non-zero self-extraction BER raises
    :class:`EmbeddingFailedError`.
    """
    layer = model.hidden_index(secret.layer)
    if model.layer_dims[layer + 1] != secret.width:
        raise ShapeError(f"layer {layer} has width {model.layer_dims[layer + 1]}, "
                         f"secret expects {secret.width}")
    warmup = min(warmup_epochs, config.epochs)
    history = []
    if warmup:
        model, history = train(model, dataset, config.replace(epochs=warmup), first_epoch=first_epoch)
    hook = WatermarkLoss(secret, class_means(model, dataset, layer, secret.n_classes), push, reduction)
    rest = config.epochs - warmup
    if rest:
        model, more = train(model, dataset, config.replace(epochs=rest), hooks=[hook],
                            first_epoch=first_epoch + warmup)
        history += more
    else:
        model = model.copy()
    if check:
        result = extract(model, dataset, secret)
        if result.mismatch_count:
            raise EmbeddingFailedError(result.ber, model, hook.centers)
    return model, hook.centers, history
