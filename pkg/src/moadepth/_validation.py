"""Input checks for array-facing entry points."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError
from .losses import DEPTH_CAP


def check_images(X, image_size: int = None) -> np.ndarray:
    """Return ``X`` as float64 [n, 3, H, W] with finite values."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise DimensionError(f"expected images of shape [n, 3, H, W], got {X.shape}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise DimensionError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_depth_maps(y, images: np.ndarray) -> np.ndarray:
    """Return ``y`` as float64 [n, H, W] matching ``images``; non-positive or >cap depth is allowed
    (it is masked out) but NaN is not."""
    y = check_array(y, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (images.shape[0],) + images.shape[2:]:
        raise DimensionError(f"depth maps {y.shape} do not match images {images.shape}")
    if not ((y > 0) & (y <= DEPTH_CAP)).any(axis=(1, 2)).all():
        raise DimensionError("every depth map needs at least one valid pixel")
    return y
