"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .pi_features import PIMatrix


def check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"features must be a 2-D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    return X


def check_labels(y, n_rows: int, n_classes: int | None = None) -> tuple[np.ndarray, int]:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if len(y) != n_rows:
        raise ValueError(f"{len(y)} labels for {n_rows} examples")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = y.astype(int)
        if not np.array_equal(rounded, y):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(int)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if len(y) else 0
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    return y, n_classes


def check_pi(pi, n_rows: int) -> np.ndarray:
    """Accept a PIMatrix or raw array; return an aligned float64 matrix."""
    if pi is None:
        raise ValueError("privileged features are required at training time")
    data = pi.data if isinstance(pi, PIMatrix) else np.asarray(pi, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"PI must be 2-D, got shape {data.shape}")
    if len(data) != n_rows:
        raise ValueError(
            f"PI rows ({len(data)}) do not align with training examples ({n_rows})")
    if not np.all(np.isfinite(data)):
        raise ValueError("PI contains NaN or Inf")
    return np.asarray(data, dtype=np.float64)
