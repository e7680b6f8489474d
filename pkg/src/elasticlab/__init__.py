"""Desk-scale lab for elastic (routed) self-distillation of small transformers."""

from .config import ConfigError, DistillConfig, ElasticConfig, ModelConfig, RunConfig, TrainConfig
from .numerics import Tensor

__all__ = ["ConfigError", "DistillConfig", "ElasticConfig", "ModelConfig", "RunConfig", "TrainConfig", "Tensor"]
__version__ = "0.1.0"
