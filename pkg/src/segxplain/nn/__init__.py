"""Minimal reverse-mode network runtime: tensors, layers, losses, optimizer."""

from segxplain.nn.tensor import Tensor
from segxplain.nn.layers import (
    Activation,
    BatchNorm,
    Concat,
    ConfigurationError,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2D,
    Network,
    Tape,
    TapeConsumedError,
    TransposedConv2D,
    backward,
    forward,
)
from segxplain.nn.losses import (
    cross_entropy_grad,
    cross_entropy_loss,
    soft_jaccard_grad,
    soft_jaccard_loss,
)
from segxplain.nn.optim import (
    OptimizerState,
    PlateauSchedule,
    TrainingError,
    optimizer_step,
    plateau_update,
)
from segxplain.nn.gradcheck import check_gradients
from segxplain.nn.checkpoint import load_model, save_model

__all__ = [
    "Activation",
    "BatchNorm",
    "Concat",
    "ConfigurationError",
    "Conv2D",
    "Dense",
    "Dropout",
    "MaxPool2D",
    "Network",
    "OptimizerState",
    "PlateauSchedule",
    "Tape",
    "TapeConsumedError",
    "Tensor",
    "TrainingError",
    "TransposedConv2D",
    "backward",
    "check_gradients",
    "cross_entropy_grad",
    "cross_entropy_loss",
    "forward",
    "load_model",
    "optimizer_step",
    "plateau_update",
    "save_model",
    "soft_jaccard_grad",
    "soft_jaccard_loss",
]
