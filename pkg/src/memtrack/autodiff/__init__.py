"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import nn, ops
from .gradcheck import grad_check, grad_check_params
from .graph import (
    AutodiffError,
    Graph,
    GraphConsumedError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
)


def backward(loss: Tensor) -> dict:
    """Gradient map for every leaf registered on ``loss``'s graph."""
    if loss.graph is None:
        raise AutodiffError("loss is a constant; nothing to differentiate")
    return loss.graph.backward(loss)


__all__ = [
    "AutodiffError", "Graph", "GraphConsumedError", "NonFiniteError", "ShapeError",
    "Tensor", "as_tensor", "backward", "grad_check", "grad_check_params", "nn", "ops",
]
