"""Tensor conventions shared by the whole package.

A tensor is a plain :class:`numpy.ndarray`. Its shape is the shape metadata,
its data is the row-major buffer. 64-bit floats are the default; 32-bit is
available for latency measurements.
"""
from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a tensor, loss or statistic contains NaN or Inf"""
    def __init__(self, what, detail=None):
        super().__init__(what, detail)
        self.what = what
        self.detail = detail

    def __str__(self):
        if self.detail is None:
            return f"Non-finite values in {self.what}"
        return f"Non-finite values in {self.what} ({self.detail})"


class ShapeError(ValueError):
    """Raised when tensors passed to an operation have incompatible shapes"""
    pass


def is_valid(t: np.ndarray) -> bool:
    """True if every element of *t* is finite"""
    return bool(np.isfinite(t).all())


def check_finite(t: np.ndarray, what: str) -> np.ndarray:
    if not is_valid(t):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise NonFiniteError(what, f"{bad} of {np.size(t)} entries")
    return t


def check_shape(t: np.ndarray, expected: Sequence, what: str):
    """Compare a shape against a template; ``None`` entries match anything"""
    shape = np.shape(t)
    if len(shape) != len(expected) or any(
        e is not None and s != e for s, e in zip(shape, expected)
    ):
        templ = tuple('*' if e is None else e for e in expected)
        raise ShapeError(f"{what}: expected shape {templ}, got {shape}")
