"""Removal attacks: magnitude pruning, plain fine-tuning, and watermark overwriting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blackbox import DetectionPolicy, RarityConfig, detect, embed_output_layer
from .errors import InputError
from .nn import MLP, TrainConfig, accuracy, train
from .whitebox import embed, extract, make_secret


@dataclass
class PruneSpec:
    rate: float
    finetune_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise InputError(f"prune rate must lie in [0, 1], got {self.rate}")
        if self.finetune_epochs < 0:
            raise InputError("finetune_epochs must be >= 0")


def magnitude_masks(model: MLP, rate: float) -> list:
    """Per-layer masks zeroing the floor(rate * count) smallest-magnitude weights.

    Ties are broken by flat index (stable sort), so the result is deterministic.
    """
    masks = []
    for w in model.weights:
        k = int(np.floor(rate * w.size))
        mask = np.ones(w.size, dtype=w.dtype)
        mask[np.argsort(np.abs(w), axis=None, kind="stable")[:k]] = 0
        masks.append(mask.reshape(w.shape))
    return masks


def prune(model: MLP, spec: PruneSpec, dataset, config: TrainConfig):
    """Prune, then sparse fine-tune with the plain loss. Returns ``(model, masks)``."""
    masks = magnitude_masks(model, spec.rate)
    pruned = model.copy()
    pruned.weights = [w * m for w, m in zip(pruned.weights, masks)]
    if spec.finetune_epochs:
        pruned, _ = train(pruned, dataset, config.replace(epochs=spec.finetune_epochs), masks=masks)
    return pruned, masks


def finetune_attack(model: MLP, dataset, epochs: int, config: TrainConfig) -> MLP:
    """Retrain with the plain loss only, at the configuration's final learning rate."""
    if epochs < 0:
        raise InputError("epochs must be >= 0")
    if epochs == 0:
        return model.copy()
    flat = config.replace(learning_rate=config.final_lr, lr_decay_factor=1.0, epochs=epochs)
    return train(model, dataset, flat)[0]


@dataclass
class OverwriteResult:
    model: MLP
    secret: object
    centers: np.ndarray
    keyset: object


def overwrite_attack(marked: MLP, dataset, attacker_seed: int, n_bits: int, K: int,
                     config: TrainConfig, lambda1: float = 0.01, lambda2: float = 0.01,
                     n_carriers: int = 1, layer: int = -1, rarity: RarityConfig | None = None,
                     multiplier: int = 20, key_lr_factor: float = 0.1,
                     max_key_epochs: int = 50, push: float = 0.0,
                     reduction: str = "sum") -> OverwriteResult:
    """Embed a fresh hidden-layer mark and fresh trigger keys on top of ``marked``.

    The attacker knows the layer and the method but not the owner's secret;
    the stolen model doubles as its own unmarked reference for key selection.
    The attacker's hidden-layer embedding is not required to converge; check
    ``extract(result.model, data, result.secret)`` to see whether it did.
    """
    width = marked.layer_dims[marked.hidden_index(layer) + 1]
    secret = make_secret(attacker_seed, marked.n_classes, n_carriers, width, n_bits,
                         lambda1, lambda2, layer)
    cfg = config.replace(seed=attacker_seed)
    model, centers, _ = embed(marked, dataset, secret, cfg, warmup_epochs=0, check=False,
                              push=push, reduction=reduction)
    model, keyset = embed_output_layer(model, marked, dataset, K, rarity or RarityConfig(layer=layer),
                                       cfg, attacker_seed, multiplier, lr_factor=key_lr_factor,
                                       max_epochs=max_key_epochs)
    return OverwriteResult(model, secret, centers, keyset)


@dataclass
class AttackReport:
    kind: str
    params: dict
    accuracy: float
    ber: float | None = None
    mismatches: int | None = None
    presence: bool | None = None
    threshold: int | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        """One CSV row per metric; ``param`` is the swept value (or empty)."""
        param = ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        metrics = {"accuracy": self.accuracy, "ber": self.ber, "mismatches": self.mismatches,
                   "presence": None if self.presence is None else int(self.presence),
                   "threshold": self.threshold, **self.extra}
        return [{"attack": self.kind, "param": param, "metric": k, "value": v}
                for k, v in metrics.items() if v is not None]


def evaluate(kind: str, params: dict, model: MLP, test, secret=None, wm_data=None,
             keyset=None, policy: DetectionPolicy | None = None) -> AttackReport:
    """Measure accuracy plus whichever watermark checks the caller has material for."""
    report = AttackReport(kind, dict(params), accuracy(model, test.inputs, test.labels))
    if secret is not None:
        report.ber = extract(model, wm_data, secret).ber
    if keyset is not None:
        result = detect(model, keyset, policy or DetectionPolicy.for_keys(keyset))
        report.mismatches, report.presence = result.mismatches, result.presence
        report.threshold = result.threshold
    return report
