"""Topology-aware multi-modal token pretraining with a small numpy autodiff engine."""

from .estimator import TopologyAwarePretrainer, check_volumes
from .model import TokenAutoEncoder, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit_model, train

__version__ = "0.1.0"

__all__ = [
    "TopologyAwarePretrainer",
    "TokenAutoEncoder",
    "TrainConfig",
    "check_volumes",
    "fit_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
