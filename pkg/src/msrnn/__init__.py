"""Multi-scale recurrent stacks for spatiotemporal prediction, built on numpy."""
from .cells import CellSpec
from .stack import ConfigError, Model, StackConfig, build_stack, forward_sequence
from .tensor import NumericError, ShapeError, Tape, Tensor
from .training import TrainConfig, evaluate, train

__all__ = [
    "CellSpec",
    "ConfigError",
    "Model",
    "NumericError",
    "ShapeError",
    "StackConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_stack",
    "evaluate",
    "forward_sequence",
    "train",
]
__version__ = "0.1.0"
