"""Continual learning with per-task relevance maps over a shared numpy MLP."""
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    IncompleteRecordError,
    InputError,
    RelmapError,
    RunawayDetectionError,
    StateError,
)
from .network import MLP_SIZES, MaskedNetwork
from .supervised import TrainConfig, run_supervised
from .unsupervised import UnsupervisedConfig, run_unsupervised

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "IncompleteRecordError", "InputError", "RelmapError",
    "RunawayDetectionError", "StateError", "MLP_SIZES", "MaskedNetwork", "TrainConfig", "run_supervised",
    "UnsupervisedConfig", "run_unsupervised",
]
