"""Sequential recommendation with a hierarchical graph attention network over timespan-aware sequence graphs."""

from .model import Ablation, Hyper, ModelParams, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, gradcheck, init_params, train

__all__ = [
    "Ablation", "Hyper", "ModelParams", "TrainConfig",
    "forward", "gradcheck", "init_params", "load_checkpoint", "save_checkpoint", "train",
]
