"""Dense matrix helpers shared by every module.

Matrices are plain 2-D ``float64`` numpy arrays; :func:`as_matrix` is the
validation gate used at module boundaries.
"""
import numpy as np

from .exceptions import ShapeError


def as_matrix(x, name="x"):
    """Return ``x`` as a C-contiguous 2-D float64 array with finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def center_columns(x):
    """Subtract each column's mean."""
    x = as_matrix(x)
    if x.shape[0] < 1:
        raise ShapeError("center_columns needs at least one row")
    return x - x.mean(axis=0, keepdims=True)


def frobenius_norm(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))
