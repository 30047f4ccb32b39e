"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, name="X", shape=None) -> np.ndarray:
    """Coerce to a float64 (n, H, W) stack of finite [0, 1] images."""
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = arr[None]
    arr = check_array(arr, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be an image or a stack of images, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ValueError(f"{name} has image shape {arr.shape[1:]}, expected {tuple(shape)}")
    return arr


def check_depths(y, images: np.ndarray, name="y") -> np.ndarray:
    """Depth stack aligned with ``images``; +inf marks misses, NaN is rejected."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != images.shape:
        raise ValueError(f"{name} has shape {arr.shape}, images have {images.shape}")
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")
    if (arr[np.isfinite(arr)] < 0).any() or np.isneginf(arr).any():
        raise ValueError(f"{name} has negative depths")
    return arr
