"""Minimal tensor engine: reverse-mode autodiff, layers, Adam, checkpoints."""
from . import functional, kernels, nn
from .checkpoint import load_checkpoint, save_checkpoint, state_hash
from .functional import ConfigError, ShapeError
from .gradcheck import check_module, check_op, finite_difference_check
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, no_grad

__all__ = [
    "Adam", "AdamState", "ConfigError", "ShapeError", "Tape", "Tensor",
    "active_tape", "adam_step", "check_module", "check_op", "finite_difference_check",
    "functional", "kernels", "load_checkpoint", "nn", "no_grad", "save_checkpoint", "state_hash",
]
