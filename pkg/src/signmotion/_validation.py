"""Small input-checking helpers shared across the package."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class ShapeError(ValueError):
    """Raised when array dimensions violate an operation's contract."""


def as_float_array(x, *, ndim: int | None = None, name: str = "array", allow_empty: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_samples(X, name: str = "X", min_samples: int = 1) -> np.ndarray:
    """2-D float64 sample matrix, finite, at least ``min_samples`` rows."""
    return check_array(
        X,
        dtype=np.float64,
        ensure_2d=True,
        ensure_min_samples=min_samples,
        input_name=name,
    )


def check_points(points, name: str = "points") -> np.ndarray:
    arr = as_float_array(points, name=name)
    if arr.shape[-1] != 3:
        raise ShapeError(f"{name} must have a trailing dimension of 3, got {arr.shape}")
    return arr
