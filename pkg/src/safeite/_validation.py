"""Input checking shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_points(X, n_features: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float 2-D array, optionally of fixed width.

    A single 1-D point is promoted to one row. Empty inputs are allowed so a
    model with no observations can be represented.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, ensure_min_samples=0, ensure_2d=True, input_name=name)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_targets(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} targets for {n_samples} inputs")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y


def check_unit_interval(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValueError(f"{name} components must lie in [0, 1]")
    return v
