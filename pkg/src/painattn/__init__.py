"""Pain-intensity classification of electrodermal activity windows.

Pure numpy forward/backward passes; no deep-learning framework.
"""
from .errors import (ConfigError, DimensionError, DomainError, FormatError, NumericError,
                     PainAttnError, StateError)
from .metrics import MetricsReport
from .model import ModelConfig, PainAttnNet
from .train import TASKS, TrainConfig

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "DomainError", "FormatError", "NumericError", "PainAttnError",
           "StateError", "MetricsReport", "ModelConfig", "PainAttnNet", "TASKS", "TrainConfig"]
