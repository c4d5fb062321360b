"""
App package initialization
"""
from app.checkpoint_manager import CheckpointManager
from app.config import config
from app.network import BackboneConfig, StylizeNet, forward
from app.training import TrainConfig, evaluate, fit_global_transform, train

__all__ = [
    "config",
    "BackboneConfig",
    "CheckpointManager",
    "StylizeNet",
    "TrainConfig",
    "evaluate",
    "fit_global_transform",
    "forward",
    "train",
]
