"""Hybrid DenseNet + shifted-window transformer classifier built on a small numpy autograd."""

from .model import HybridConfig, HybridModel, TrainState, plateau_step, train_step
from .tensor import Tensor, backward, create, finite_diff_check, no_grad

__all__ = [
    "HybridConfig",
    "HybridModel",
    "Tensor",
    "TrainState",
    "backward",
    "create",
    "finite_diff_check",
    "no_grad",
    "plateau_step",
    "train_step",
]

__version__ = "0.1.0"
