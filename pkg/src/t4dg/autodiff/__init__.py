"""Minimal reverse-mode autodiff on numpy arrays."""

from . import ops
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .gradcheck import grad_check
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .optim import Adam
from .tensor import ShapeError, Tensor, backward, make_node, no_grad, precision

__all__ = [
    "Adam",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "grad_check",
    "load_checkpoint",
    "make_node",
    "no_grad",
    "ops",
    "precision",
    "save_checkpoint",
]
