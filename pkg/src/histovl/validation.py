"""Input checks shared by the estimators and free functions."""
from __future__ import annotations

import numpy as np

from .exceptions import InvalidArgumentError, ShapeError


def check_matrix(x, name="X", ndim=2, allow_empty=False, finite=True) -> np.ndarray:
    """Float64 array of the given rank; raises ShapeError or InvalidArgumentError."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not allow_empty and a.size == 0:
        raise ShapeError(f"{name} is empty")
    if finite and not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return a


def check_labels(y, n=None, name="y") -> np.ndarray:
    a = np.asarray(y)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if n is not None and len(a) != n:
        raise ShapeError(f"{name} has {len(a)} entries, expected {n}")
    if a.size and not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a.astype(np.float64), 1), 0)):
            raise InvalidArgumentError(f"{name} must hold integer class indices")
        a = a.astype(np.int64)
    if a.size and a.min() < 0:
        raise InvalidArgumentError(f"{name} has negative class indices")
    return a.astype(np.int64)


def check_same_width(a, b, names=("query", "database")):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{names[0]} width {a.shape[-1]} != {names[1]} width {b.shape[-1]}")


def check_positive_int(v, name, minimum=1) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < minimum:
        raise InvalidArgumentError(f"{name} must be an integer >= {minimum}, got {v!r}")
    return int(v)


def l2_normalize(x, axis=-1, eps=0.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n <= eps):
        raise InvalidArgumentError("cannot normalise a zero vector")
    return x / n
