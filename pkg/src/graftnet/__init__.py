"""Dual-branch CNN + transformer binary segmentation on a small numpy autodiff engine."""

from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, load_config, parse_config, serialize_config
from .model import GraftNet, ModelOutput
from .objective import LossReport, joint_loss
from .tensor import Tensor, no_grad
from .trainer import cosine_lr, train

__all__ = [
    "ConfigError",
    "GraftNet",
    "LossReport",
    "ModelConfig",
    "ModelOutput",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "cosine_lr",
    "joint_loss",
    "load_config",
    "no_grad",
    "parse_config",
    "serialize_config",
    "train",
]

__version__ = "0.1.0"
