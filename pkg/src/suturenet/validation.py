"""Input checks shared by the estimator API and the command line."""
from __future__ import annotations

import numpy as np


def check_images(X, shape=None, channels=3):
    """Return ``X`` as a float64 ``N x H x W x C`` array in ``[0, 1]``.

    8-bit input is rescaled by 1/255.  A single ``H x W x C`` image is
    promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped N x H x W x {channels}, got array of shape {X.shape}")
    if X.shape[-1] != channels:
        raise ValueError(f"expected {channels} colour channels, got {X.shape[-1]}")
    if X.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    else:
        X = X.astype(np.float64)
        if not np.isfinite(X).all():
            raise ValueError("images contain NaN or infinite values")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("float images must have values in [0, 1]")
    if shape is not None and X.shape[1:3] != tuple(shape):
        raise ValueError(f"images must be {shape[0]} x {shape[1]} (H x W), got {X.shape[1]} x {X.shape[2]}")
    return X


def check_landmark_sets(y, n_samples, shape):
    """Validate one ``(k, 2)`` array of ``(x, y)`` per image."""
    y = list(y)
    if len(y) != n_samples:
        raise ValueError(f"got {len(y)} landmark sets for {n_samples} images")
    h, w = shape
    out = []
    for i, pts in enumerate(y):
        p = np.asarray(pts, dtype=np.float64)
        if p.size == 0:
            out.append(np.zeros((0, 2)))
            continue
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError(f"landmark set {i} must have shape (k, 2), got {p.shape}")
        if (p[:, 0] < 0).any() or (p[:, 0] >= w).any() or (p[:, 1] < 0).any() or (p[:, 1] >= h).any():
            raise ValueError(f"landmark set {i} has points outside the {w}x{h} frame")
        out.append(p)
    return out


def check_threshold(threshold):
    t = float(threshold)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    return t


def check_is_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
