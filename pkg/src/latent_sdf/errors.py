"""Exception types shared across the package."""

from __future__ import annotations


class LatentSdfError(Exception):
    """Base class for all package errors."""


class UsageError(LatentSdfError, ValueError):
    """Caller violated a precondition (bad argument, wrong call order)."""


class ShapeError(UsageError):
    """Operand shapes are inconsistent with a primitive's signature."""

    def __init__(self, message: str, node=None):
        self.node = node
        if node is not None:
            message = f"{node.describe()}: {message}"
        super().__init__(message)


class NumericError(LatentSdfError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, node=None):
        self.node = node
        if node is not None:
            message = f"{node.describe()}: {message}"
        super().__init__(message)


class TrainingError(NumericError):
    """Optimization diverged; carries the failing step index."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")


class FormatError(LatentSdfError):
    """A file on disk is malformed or has an unsupported version."""
