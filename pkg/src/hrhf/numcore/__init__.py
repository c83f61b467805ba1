"""Deterministic float64 tensor graphs, reverse-mode gradients and Adam."""
from . import ops
from .check import grad_check
from .graph import (
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    as_tensor,
    evaluate,
    gradients,
    register_op,
    registered_ops,
    value_and_grad,
)
from .ops import conv2d, softmax, unbroadcast
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "Graph", "GraphError", "NonFiniteError", "ShapeError",
    "adam_step", "as_tensor", "conv2d", "evaluate", "grad_check", "gradients",
    "ops", "register_op", "registered_ops", "softmax", "unbroadcast",
    "value_and_grad",
]
