"""Activation-distribution watermarks for small MLPs, with black-box trigger keys."""

from .blackbox import detect, detection_threshold, embed_output_layer
from .nn import MLP, TrainConfig, init_mlp, train
from .whitebox import embed, extract, make_secret

__version__ = "0.1.0"
__all__ = ["MLP", "TrainConfig", "detect", "detection_threshold", "embed", "embed_output_layer",
           "extract", "init_mlp", "make_secret", "train"]
