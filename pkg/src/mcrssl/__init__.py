"""Teacher-student masked prediction with model-level consistency regularization.

A numpy-only, bitwise-deterministic implementation: own reverse-mode
autodiff, a small Transformer student/teacher, dual stochastic sub-model
passes with a consistency loss, and a frozen-upstream layer-weight probe.
"""
from .config import Config, ConfigError, load_config
from .model import Model, ModelConfig, init_params
from .objective import LossBundle, mcr_loss, pred_loss, total_loss
from .trainer import MetricsRecord, NonFiniteLossError, Trainer

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfigError",
    "LossBundle",
    "MetricsRecord",
    "Model",
    "ModelConfig",
    "NonFiniteLossError",
    "Trainer",
    "init_params",
    "load_config",
    "mcr_loss",
    "pred_loss",
    "total_loss",
]
