"""Experiment configuration and the end-to-end stages shared by the CLI and the verifier."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .blackbox import DetectionPolicy, RarityConfig, embed_output_layer
from .data import SyntheticSpec, gen_synthetic, load_mnist
from .errors import InputError
from .nn import MLP, TrainConfig, init_mlp, train
from .whitebox import embed, make_secret


def derive_seed(master: int, role: str) -> int:
    """Independent 63-bit seed for a named role (owner, attacker-3, ...)."""
    digest = hashlib.sha256(f"{master}/{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    """Every knob of the embed, verify and attack pipeline, with desk-scale defaults.

    The defaults target the 4,000-image MNIST subset on one CPU core; see
    :meth:`full` for the settings used with the complete training set.
    """

    dataset: str = "mnist"
    data_dir: str | None = None
    max_train: int | None = None
    synthetic_dim: int = 256
    synthetic_per_class: int = 200
    synthetic_sigma: float = 0.1
    synthetic_spread: tuple = (0.2, 0.8)
    n_classes: int = 10
    hidden: tuple = (512, 512)
    seed: int = 0
    learning_rate: float = 0.05
    batch_size: int = 64
    base_epochs: int = 30
    embed_epochs: int = 30
    lambda1: float = 0.01
    lambda2: float = 0.01
    push: float = 0.0
    reduction: str = "sum"
    wm_bits: int = 4
    carriers: int = 1
    layer: int = -1
    key_size: int = 20
    key_multiplier: int = 20
    epsilon: float | None = None
    density_tau: float = 0
    key_lr_factor: float = 1.0
    key_max_epochs: int = 100
    fp_bound: float = 1e-3
    prune_finetune_epochs: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dataset not in ("mnist", "synthetic"):
            raise InputError(f"unknown dataset {self.dataset!r}")

    @classmethod
    def full(cls, **overrides) -> "ExperimentConfig":
        """Whole-training-set settings: fewer passes and the conventional 10x key-tuning drop."""
        base = dict(max_train=None, base_epochs=20, embed_epochs=20, key_lr_factor=0.1,
                    key_max_epochs=50)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def train_config(self, epochs: int, role: str = "owner") -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, epochs,
                           derive_seed(self.seed, role + "/shuffle"))

    def rarity(self) -> RarityConfig:
        return RarityConfig(self.epsilon, self.density_tau, self.layer)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.n_classes, self.synthetic_dim, self.synthetic_per_class,
                             self.synthetic_sigma, derive_seed(self.seed, "data"),
                             mean_low=self.synthetic_spread[0], mean_high=self.synthetic_spread[1])


def load_data(cfg: ExperimentConfig):
    """Return ``(train, test)`` for the configured dataset."""
    if cfg.dataset == "synthetic":
        spec = cfg.synthetic_spec()
        return gen_synthetic(spec, "train"), gen_synthetic(spec, "test")
    return load_mnist(cfg.data_dir, cfg.max_train, cfg.seed)


def layer_dims(cfg: ExperimentConfig, train_set) -> list:
    return [train_set.dim, *cfg.hidden, train_set.n_classes]


def train_baseline(cfg: ExperimentConfig, train_set, role: str = "owner", epochs=None):
    model = init_mlp(layer_dims(cfg, train_set), derive_seed(cfg.seed, role + "/init"))
    n = cfg.base_epochs if epochs is None else epochs
    return train(model, train_set, cfg.train_config(n, role))


def owner_secret(cfg: ExperimentConfig, width: int, role: str = "owner"):
    return make_secret(derive_seed(cfg.seed, role + "/secret"), cfg.n_classes, cfg.carriers,
                       width, cfg.wm_bits, cfg.lambda1, cfg.lambda2, cfg.layer)


def embed_hidden(cfg: ExperimentConfig, base: MLP, train_set, secret, role: str = "owner",
                 check: bool = True):
    """Continue from a trained baseline with the hidden-layer mark for ``embed_epochs``."""
    tc = cfg.train_config(cfg.embed_epochs, role)
    return embed(base, train_set, secret, tc, warmup_epochs=0, check=check,
                 first_epoch=cfg.base_epochs, push=cfg.push, reduction=cfg.reduction)


def control_run(cfg: ExperimentConfig, base: MLP, train_set, role: str = "owner"):
    """The unmarked counterpart of :func:`embed_hidden`: same epochs, plain loss."""
    return train(base, train_set, cfg.train_config(cfg.embed_epochs, role),
                 first_epoch=cfg.base_epochs)


def embed_keys(cfg: ExperimentConfig, marked: MLP, unmarked: MLP, train_set, role: str = "owner"):
    return embed_output_layer(marked, unmarked, train_set, cfg.key_size, cfg.rarity(),
                              cfg.train_config(0, role), derive_seed(cfg.seed, role + "/keys"),
                              cfg.key_multiplier, max_epochs=cfg.key_max_epochs,
                              lr_factor=cfg.key_lr_factor)


def policy_for(cfg: ExperimentConfig, keyset, threshold_fn=None) -> DetectionPolicy:
    return DetectionPolicy.for_keys(keyset, cfg.fp_bound, threshold_fn)


@dataclass
class OwnerArtifacts:
    base: MLP
    control: MLP
    marked: MLP
    final: MLP
    secret: object
    centers: object
    keyset: object
    history: dict = field(default_factory=dict)


def build_owner(cfg: ExperimentConfig, train_set, role: str = "owner") -> OwnerArtifacts:
    """Baseline, unmarked control, hidden-layer mark, then trigger keys."""
    base, h0 = train_baseline(cfg, train_set, role)
    control, hc = control_run(cfg, base, train_set, role)
    secret = owner_secret(cfg, base.layer_dims[base.hidden_index(cfg.layer) + 1], role)
    marked, centers, h1 = embed_hidden(cfg, base, train_set, secret, role)
    final, keyset = embed_keys(cfg, marked, base, train_set, role)
    return OwnerArtifacts(base, control, marked, final, secret, centers, keyset,
                          {"baseline": h0, "control": hc, "embed": h1})
