"""Minimal numpy-backed tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, grad_check_many, relative_error
from .nn import Conv2d, LayerNorm, Linear, Module, parameter
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad, precision, topological_order

__all__ = [
    "Adam", "AdamState", "Conv2d", "LayerNorm", "Linear", "Module", "Tensor",
    "adam_step", "grad_check", "grad_check_many", "no_grad", "ops", "parameter",
    "precision", "relative_error", "topological_order",
]
