"""Exceptions and input checks shared across the package."""
import numpy as np


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class DegenerateBlendError(InvalidInputError):
    """Raised when a blended skinning transform cannot be inverted."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class NumericalError(ArithmeticError):
    """Raised when training produces a non-finite loss."""


class DatasetError(ValueError):
    """Raised when a dataset manifest or its images cannot be parsed."""


def check_points(x, name="x"):
    """Return ``x`` as a float array of shape (P, 3), rejecting NaN/Inf."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (P, 3), got {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return x


def check_finite(a, name):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a
