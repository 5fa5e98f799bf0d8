"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-export)


def check_images(X, n_features=None):
    """Validate a batch of flattened images: 2-D, finite, inside [0, 1].

    Returns a float32 C-contiguous copy-on-demand array.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected [n, pixels], got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} pixels per image, got {X.shape[1]}")
    return np.ascontiguousarray(X)


def check_labels(y, n=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} images")
    return y.astype(np.int64)
