"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from . import ops
from .optim import OptimizerState, adam_step
from .tensor import DTYPE, Node, ParamStore, Tape, Tensor, active_tape, as_tensor, backward, no_tape

__all__ = [
    "DTYPE",
    "Node",
    "OptimizerState",
    "ParamStore",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "backward",
    "no_tape",
    "ops",
]
