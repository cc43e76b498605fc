"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_points(x, name: str = "points") -> np.ndarray:
    """Coerce ``x`` to a float64 (N, 3) array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_finite(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_shape(x, shape: tuple, name: str = "array") -> np.ndarray:
    """Check trailing dimensions; ``None`` entries in ``shape`` match anything."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != len(shape):
        raise ValueError(f"{name} must have {len(shape)} dimensions, got {arr.ndim}")
    for got, want in zip(arr.shape, shape):
        if want is not None and got != want:
            raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr
