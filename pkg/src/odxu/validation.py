"""Input-validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_matrix(X, *, n_features: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a 2-d float64 array and check finiteness/width."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"{name} has {X.shape[1]} features, expected {n_features}"
        )
    return X


def check_labels(y, n: int, *, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be 1-dimensional with {n} entries")
    return y


def check_class_indices(y, n_classes: int, *, name: str = "y") -> np.ndarray:
    """Validate integer class labels in ``[0, n_classes)``."""
    y = np.asarray(y)
    if y.size and (not np.issubdtype(y.dtype, np.integer)):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must hold integer class indices")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(
            f"{name} holds class index outside [0, {n_classes})"
        )
    return y


def check_probability_vector(p, *, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size < 2:
        raise ValueError("probability vector needs at least 2 classes")
    if np.any(p < -tol):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
    return np.clip(p, 0.0, None)


def check_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
