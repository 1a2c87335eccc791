"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_image_array(X, channels: int | None = None,
                      image_size: int | None = None) -> np.ndarray:
    """Coerce to a float64 (n, C, H, W) stack with values in [0, 1].

    A (n, H, W) array is promoted to single-channel.  Square images only.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected (n, C, H, W) or (n, H, W) images, got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[0] == 0:
        raise ValueError("empty image array")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    """Coerce to non-negative int64 labels of length n_samples."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.round(np.asarray(y, dtype=np.float64))
        if not np.allclose(rounded, y):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if (y < 0).any():
        raise ValueError("labels must be non-negative")
    return y
