"""Input validation helpers shared by the estimators and data types."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError


def check_coords(coords, name="coords"):
    """Return a finite float64 (n, 2) coordinate array."""
    try:
        coords = check_array(coords, dtype=np.float64, ensure_2d=True,
                             ensure_all_finite=True)
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from None
    if coords.shape[1] != 2:
        raise DataError(f"{name} must have exactly 2 columns, got {coords.shape[1]}")
    return coords


def check_matrix(values, n_rows=None, name="matrix", allow_3d=False):
    """Return a finite float64 2-D (or 3-D) array with the expected row count."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim == 3 and not allow_3d or arr.ndim not in (2, 3):
        raise DataError(f"{name} has unsupported shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise DataError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    return arr


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (strict and value == 0):
        raise ValueError(f"{name} must be {'>' if strict else '>='} 0, got {value}")
    return float(value)


def check_bounds(bounds, name):
    lo, hi = (float(b) for b in bounds)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ValueError(f"{name} bounds must be finite and ordered, got {bounds!r}")
    return lo, hi


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for an int seed, generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
