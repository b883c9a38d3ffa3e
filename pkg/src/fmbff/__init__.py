"""Encoder-decoder segmentation network with attention-fused skips,
built on a small reverse-mode autodiff tensor engine."""

from .engine import (
    BatchNormState,
    ParamStore,
    Tensor,
    backward,
    dtype_session,
    finite_diff_check,
    set_default_dtype,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    FmbffError,
    FormatError,
    ParseError,
    StateError,
    TrainingDiverged,
    UsageError,
    ValidationError,
)
from .model import ModelConfig, ModelParams, build_model, model_forward, param_count

# The train() loop is exported as train_model: re-exporting it under its
# own name would shadow the `fmbff.train` submodule attribute.
from .train import TrainConfig, TrainState, load_checkpoint, save_checkpoint
from .train import train as train_model

__all__ = [
    "BatchNormState",
    "ParamStore",
    "Tensor",
    "backward",
    "dtype_session",
    "finite_diff_check",
    "set_default_dtype",
    "ConfigurationError",
    "DimensionError",
    "FmbffError",
    "FormatError",
    "ParseError",
    "StateError",
    "TrainingDiverged",
    "UsageError",
    "ValidationError",
    "ModelConfig",
    "ModelParams",
    "build_model",
    "model_forward",
    "param_count",
    "TrainConfig",
    "TrainState",
    "load_checkpoint",
    "save_checkpoint",
    "train_model",
]

__version__ = "0.1.0"
