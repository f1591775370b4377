"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from .check import finite_difference_check
from .graph import Graph, Node, backward, evaluate
from .primitives import PRIMITIVES

__all__ = ["Graph", "Node", "evaluate", "backward", "finite_difference_check", "PRIMITIVES"]
