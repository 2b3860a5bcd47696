"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .exceptions import RangeError, ShapeError


def check_images(X, channels: int = 3) -> np.ndarray:
    """Validate a batch of byte-range images shaped (n, channels, h, w); return float64."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False)
    if X.ndim == 3 and channels == 1:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise ShapeError(f"expected images shaped (n, {channels}, h, w), got {X.shape}")
    if X.min() < 0 or X.max() > 255:
        raise RangeError(f"pixel values must lie in [0, 255], got [{X.min()}, {X.max()}]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if len(y) != n:
        raise ShapeError(f"{len(y)} labels for {n} images")
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"labels must be 0 (Normal) or 1 (Cancer), got {np.unique(y)[:5]}")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels must contain both classes")
    return y.astype(np.int64)


def check_groups(groups, n: int) -> np.ndarray:
    if groups is None:
        return np.array([f"sample{i}" for i in range(n)])
    groups = column_or_1d(groups)
    if len(groups) != n:
        raise ShapeError(f"{len(groups)} group ids for {n} images")
    return np.asarray(groups).astype(str)
