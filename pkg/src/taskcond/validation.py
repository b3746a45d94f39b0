"""Input validation helpers shared by the estimator-facing API."""

import numpy as np


def check_matrix(X, name="X", min_rows=1):
    """Validate and coerce a 2-D float64 sample matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (samples x features), got ndim={X.ndim}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_vector(v, name="v", width=None):
    """Validate a 1-D finite float64 vector, optionally of fixed width."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if width is not None and v.shape[0] != width:
        raise ValueError(f"{name} must have length {width}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def check_positive_vector(v, name="v", width=None):
    v = check_vector(v, name=name, width=width)
    if np.any(v <= 0):
        raise ValueError(f"{name} entries must be strictly positive")
    return v


def check_labels(y, n_classes=None, name="y"):
    """Validate integer class labels, optionally bounded by a class count."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={y.ndim}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        yi = y.astype(np.int64)
        if not np.array_equal(yi, y):
            raise ValueError(f"{name} must contain integer labels")
        y = yi
    y = y.astype(np.int64)
    if n_classes is not None and y.size:
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError(
                f"{name} labels must lie in [0, {n_classes}), got range "
                f"[{y.min()}, {y.max()}]"
            )
    return y


def check_same_length(X, y, name_x="X", name_y="y"):
    X = np.asarray(X)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError(
            f"{name_x} and {name_y} disagree on sample count: "
            f"{X.shape[0]} vs {y.shape[0]}"
        )
