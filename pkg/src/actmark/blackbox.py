"""Output-layer (black-box) watermarking: trigger keys and binomial detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .data import Dataset
from .errors import (ConvergenceError, InputError, InsufficientKeysError, KeyTooShortError,
                     ProtocolError, RarityUnsatisfiableError, ShapeError)
from .nn import MLP, TrainConfig, epoch_order, run_epoch


def false_positive_prob(K: int, C: int, n_k: int) -> float:
    """Probability that a guessing model shows fewer than ``n_k`` mismatches on K keys.

    A random model matches each key label with probability 1/C, so the
    mismatch count is Binomial(K, 1 - 1/C).
    """
    if C < 2:
        raise InputError("need at least two classes")
    if not 1 <= n_k <= K + 1:
        raise InputError(f"n_k must lie in [1, K+1], got {n_k} for K={K}")
    k = np.arange(n_k)
    log_terms = (gammaln(K + 1) - gammaln(k + 1) - gammaln(K - k + 1)
                 + k * math.log1p(-1.0 / C) + (K - k) * math.log(1.0 / C))
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def detection_threshold(K: int, C: int, fp_bound: float = 1e-3) -> int:
    """Largest mismatch threshold whose false-positive probability stays below ``fp_bound``."""
    if not 0 < fp_bound < 1:
        raise InputError("fp_bound must lie in (0, 1)")
    if K < 1:
        raise KeyTooShortError("key set is empty")
    best = None
    for n_k in range(1, K + 2):
        if false_positive_prob(K, C, n_k) < fp_bound:
            best = n_k
        else:
            break  # monotone in n_k
    if best is None:
        raise KeyTooShortError(f"no threshold keeps the false-positive rate of K={K}, C={C} "
                               f"below {fp_bound:g}; use more keys")
    return best


@dataclass
class DetectionPolicy:
    K: int
    C: int
    fp_bound: float = 1e-3
    threshold: int = field(default=None)

    def __post_init__(self):
        if self.threshold is None:
            self.threshold = detection_threshold(self.K, self.C, self.fp_bound)

    @classmethod
    def for_keys(cls, keyset: "BlackboxKeySet", fp_bound: float = 1e-3, threshold_fn=None):
        fn = threshold_fn or detection_threshold
        return cls(keyset.K, keyset.n_classes, fp_bound,
                   fn(keyset.K, keyset.n_classes, fp_bound))


@dataclass
class BlackboxKeySet:
    inputs: np.ndarray  # (K, d) float32
    labels: np.ndarray  # (K,) int64
    n_classes: int
    n_candidates: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ShapeError(f"key inputs {self.inputs.shape} / labels {self.labels.shape} disagree")
        if len(self.labels) > self.n_candidates:
            raise InputError("more keys than candidates")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError("key label out of range")

    @property
    def K(self) -> int:
        return len(self.labels)


@dataclass
class RarityConfig:
    """Latent-space density filter: accept a candidate when at most ``tau``
    training points lie within distance ``epsilon`` of it.

    ``epsilon=None`` means "derive from the data" (see :func:`default_epsilon`);
    ``tau=math.inf`` disables the filter.
    """

    epsilon: float | None = None
    tau: float = 0
    layer: int = -1
    max_draw_factor: int = 100

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise InputError("epsilon must be > 0")
        if self.tau < 0:
            raise InputError("tau must be >= 0")


def generate_candidates(rng, n: int, dim: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """``n`` distinct uniform samples from the box [low, high]^dim."""
    if n < 1:
        raise InputError("need at least one candidate")
    rng = np.random.default_rng(rng)
    out = np.empty((0, dim), dtype=np.float32)
    while len(out) < n:
        fresh = rng.uniform(low, high, size=(n - len(out), dim)).astype(np.float32)
        merged = np.concatenate([out, fresh])
        _, first = np.unique(merged, axis=0, return_index=True)
        out = merged[np.sort(first)]
    return out


def default_epsilon(train_latents, seed: int = 0, sample: int = 1000) -> float:
    """Median nearest-neighbour distance within a seeded latent subsample.

    Tracks the local spacing of training latents, which stays meaningful when
    embedding compresses the layer's overall spread.
    """
    z = np.asarray(train_latents, dtype=np.float64)
    if len(z) < 2:
        raise InputError("need at least two latent points")
    if len(z) > sample:
        z = z[np.random.default_rng([seed, 3]).choice(len(z), sample, replace=False)]
    sq = (z * z).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * z @ z.T
    np.fill_diagonal(d2, np.inf)
    eps = float(np.median(np.sqrt(np.maximum(d2.min(1), 0.0))))
    if eps <= 0:
        raise InputError("training latents are degenerate; set epsilon explicitly")
    return eps


def neighbor_counts(query, reference, epsilon: float, chunk: int = 512) -> np.ndarray:
    """Number of reference rows within Euclidean distance ``epsilon`` of each query row."""
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    r_sq = (r * r).sum(1)
    counts = np.empty(len(q), dtype=np.int64)
    for i in range(0, len(q), chunk):
        block = q[i:i + chunk]
        d2 = (block * block).sum(1)[:, None] + r_sq[None, :] - 2.0 * block @ r.T
        counts[i:i + chunk] = (d2 <= epsilon * epsilon).sum(1)
    return counts


def rarity_filter(model: MLP, candidates, train_latents, cfg: RarityConfig, rng=None,
                  n_target: int | None = None):
    """Keep candidates whose latent neighbourhood is sparse, redrawing rejects.

    Returns ``(accepted, epsilon, acceptance_rate)``. Rejected candidates are
    replaced with fresh uniform draws from ``rng`` until ``n_target``
    (default: ``len(candidates)``) are accepted; after ``max_draw_factor``
    times that many draws :class:`RarityUnsatisfiableError` is raised.
    """
    candidates = np.asarray(candidates, dtype=np.float32)
    n_target = len(candidates) if n_target is None else n_target
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(train_latents)
    if math.isinf(cfg.tau):
        return candidates[:n_target], eps, 1.0
    rng = np.random.default_rng(rng)
    cap = cfg.max_draw_factor * n_target
    accepted, drawn, batch = [], 0, candidates
    while True:
        counts = neighbor_counts(model.activations(batch, cfg.layer), train_latents, eps)
        drawn += len(batch)
        accepted.extend(batch[counts <= cfg.tau])
        if len(accepted) >= n_target:
            return np.stack(accepted[:n_target]), eps, n_target / drawn
        if drawn >= cap:
            rate = len(accepted) / drawn
            raise RarityUnsatisfiableError(
                f"only {len(accepted)} of {n_target} candidates accepted after {drawn} draws "
                f"(acceptance rate {rate:.4f}); increase epsilon's sparsity budget tau "
                f"or lower epsilon", rate)
        need = min(n_target - len(accepted), cap - drawn)
        batch = rng.uniform(0.0, 1.0, size=(need, candidates.shape[1])).astype(np.float32)


def key_accuracy(model: MLP, inputs, labels) -> float:
    return float((model.predict(inputs) == np.asarray(labels)).mean())


def embed_output_layer(marked: MLP, unmarked: MLP, dataset: Dataset, K: int, cfg: RarityConfig,
                       config: TrainConfig, seed: int, multiplier: int = 20,
                       target_accuracy: float = 0.99, max_epochs: int = 50, mix: int = 10,
                       lr_factor: float = 0.1):
    """Generate trigger keys and fine-tune ``marked`` until it has memorised them.

    ``multiplier * K`` rare uniform candidates get random labels; each
    fine-tuning epoch (at ``lr_factor`` times the configured rate) covers all of them
    plus ``mix`` times as many random training samples. The final K keys are
    drawn from candidates the fine-tuned model gets right and ``unmarked``
    gets wrong. Returns ``(model, keyset)``.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    n_cand = multiplier * K
    rng = np.random.default_rng([seed, 2])
    train_latents = marked.activations(dataset.inputs, cfg.layer)
    candidates = generate_candidates(rng, n_cand, dataset.dim)
    if cfg.epsilon is None:
        cfg = RarityConfig(default_epsilon(train_latents, seed), cfg.tau, cfg.layer,
                           cfg.max_draw_factor)
    keys, eps, rate = rarity_filter(marked, candidates, train_latents, cfg, rng)
    key_labels = rng.integers(0, dataset.n_classes, size=n_cand)

    lr = config.learning_rate * lr_factor
    model = marked.copy()
    n_mix = min(len(dataset), mix * n_cand)
    epochs_used, acc = 0, key_accuracy(model, keys, key_labels)
    for epoch in range(max_epochs):
        if acc > target_accuracy:
            break
        pick = np.random.default_rng([seed, 4, epoch]).choice(len(dataset), n_mix, replace=False)
        x = np.concatenate([keys, dataset.inputs[pick]])
        y = np.concatenate([key_labels, dataset.labels[pick]])
        run_epoch(model, x, y, lr, config.batch_size, epoch_order(seed, epoch, len(y)))
        epochs_used += 1
        acc = key_accuracy(model, keys, key_labels)
    if not acc > target_accuracy:
        raise ConvergenceError(f"key accuracy {acc:.3f} after {max_epochs} epochs "
                               f"(target > {target_accuracy})")

    ok = (model.predict(keys) == key_labels) & (unmarked.predict(keys) != key_labels)
    survivors = np.flatnonzero(ok)
    if len(survivors) < K:
        raise InsufficientKeysError(f"{len(survivors)} candidates survive selection, need {K}; "
                                    f"raise the key multiplier", len(survivors))
    chosen = np.sort(rng.choice(survivors, size=K, replace=False))
    meta = {"epsilon": eps, "lr": lr, "acceptance_rate": rate, "finetune_epochs": epochs_used,
            "candidate_accuracy": acc, "survivors": int(len(survivors))}
    return model, BlackboxKeySet(keys[chosen], key_labels[chosen], dataset.n_classes, n_cand,
                                 seed, meta)


@dataclass
class DetectionResult:
    presence: bool
    mismatches: int
    threshold: int
    K: int


def detect(oracle, keyset: BlackboxKeySet, policy: DetectionPolicy) -> DetectionResult:
    """Query ``oracle`` with the keys and declare presence iff mismatches < threshold."""
    labels = np.asarray(oracle.predict(keyset.inputs))
    if labels.shape != (keyset.K,):
        raise ProtocolError(f"oracle returned {labels.shape[0] if labels.ndim else 0} labels "
                            f"for {keyset.K} keys")
    n_k = int((labels != keyset.labels).sum())
    return DetectionResult(n_k < policy.threshold, n_k, policy.threshold, keyset.K)
