"""Input-validation helpers shared by the estimator, loaders and metrics."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None, shape: tuple | None = None,
                   allow_empty: bool = True) -> np.ndarray:
    """Coerce to a float64 ndarray, checking dimensionality and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if shape is not None:
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_label_array(y, name: str, n_classes: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ValueError(
            f"{name} contains label {int(arr.max())} >= class count {n_classes}"
        )
    return arr


def check_prob_rows(prob, name: str = "probabilities", tol: float = 1e-6) -> np.ndarray:
    """Validate an (n, C) matrix of per-class probabilities (rows sum to ~1)."""
    arr = as_float_array(prob, name, ndim=2)
    if arr.size and (arr.min() < -tol or arr.max() > 1 + tol):
        raise ValueError(f"{name} outside [0, 1]")
    if arr.size:
        sums = arr.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-3:
            raise ValueError(f"{name} rows do not sum to 1")
    return arr


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
