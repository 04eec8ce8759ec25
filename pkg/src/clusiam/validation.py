"""Input validation helpers shared by the estimator layer."""

from __future__ import annotations

import numpy as np


def check_images(X) -> np.ndarray:
    """Validate a batch of images: (n, H, W, 3) float64 with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if not np.isfinite(X).all():
        raise ValueError("image values must be finite")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_features(X) -> np.ndarray:
    """Validate a feature matrix: finite 2-D float64 with at least one row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"expected a non-empty (n, D) feature matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("feature values must be finite")
    return X
