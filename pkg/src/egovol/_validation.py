"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .camera import CameraModel


def check_depth_maps(X, cam: CameraModel) -> np.ndarray:
    """Coerce to an ``(n, height, width)`` float array matching ``cam``.

    Accepts a single map, a stack, or ``(n, height*width)`` rows.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and X.shape == (cam.height, cam.width):
        X = X[None]
    elif X.ndim == 2 and X.shape[1] == cam.height * cam.width:
        X = X.reshape(-1, cam.height, cam.width)
    if X.ndim != 3 or X.shape[1:] != (cam.height, cam.width):
        raise ValueError(
            f"depth maps of shape {X.shape} do not match a {cam.width}x{cam.height} camera")
    return X


def check_quantized(X, n_bins: int, n_columns: int | None = None) -> np.ndarray:
    """Coerce quantized depth maps to ``(n, columns)`` integer rows in [0, n_bins]."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None]
    elif X.ndim == 3:
        X = X.reshape(len(X), -1)
    if X.ndim != 2:
        raise ValueError(f"expected quantized maps as 2-D rows, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("quantized depth maps must hold integer bin indices")
    X = X.astype(np.intp)
    if n_columns is not None and X.shape[1] != n_columns:
        raise ValueError(f"expected {n_columns} grid columns, got {X.shape[1]}")
    if X.size and (X.min() < 0 or X.max() > n_bins):
        raise ValueError(f"bin indices must lie in [0, {n_bins}]")
    return X
