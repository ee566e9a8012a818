"""Viewpoint-equivariant matrix-capsule autoencoder for 3D human pose
estimation, self-contained on numpy: autodiff tensors, VB-style capsule
routing, multi-task decoders, a self-balancing loss, synthetic multi-view
data, metrics, training, and a CLI."""

from .model import DecaConfig, DecaModel
from .training import TrainConfig, evaluate, train

__all__ = ["DecaConfig", "DecaModel", "TrainConfig", "train", "evaluate"]
__version__ = "0.1.0"
