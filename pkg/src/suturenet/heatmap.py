"""Gaussian label encoding and threshold/centroid decoding.

Pixel ``(row i, col j)`` is sampled at image coordinate ``(x=j, y=i)``.
Landmarks are ``(x, y)`` pairs and may be subpixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TRUNCATE_SIGMAS = 4.0
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Heatmap:
    foreground: np.ndarray
    background: np.ndarray

    @property
    def shape(self):
        return self.foreground.shape

    def stacked(self):
        """``2 x H x W`` array, foreground channel first."""
        return np.stack([self.foreground, self.background])


def as_points(landmarks):
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"landmarks must be an (n, 2) array of (x, y), got shape {pts.shape}")
    return pts


def encode(landmarks, shape, sigma=1.0):
    """Render ``landmarks`` into a two-channel Gaussian label map of ``shape=(H, W)``.

    Each landmark contributes ``exp(-d^2 / (2 sigma^2))`` (peak 1.0), cut to
    zero beyond ``4 sigma``; overlapping peaks combine by maximum.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    pts = as_points(landmarks)
    if len(pts) and ((pts[:, 0] < 0).any() or (pts[:, 0] >= w).any()
                     or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any()):
        raise ValueError(f"landmarks must lie inside the {w}x{h} frame")

    fg = np.zeros((h, w))
    radius = TRUNCATE_SIGMAS * sigma
    for x, y in pts:
        x0, x1 = max(int(np.floor(x - radius)), 0), min(int(np.ceil(x + radius)), w - 1)
        y0, y1 = max(int(np.floor(y - radius)), 0), min(int(np.ceil(y + radius)), h - 1)
        dx = np.arange(x0, x1 + 1) - x
        dy = np.arange(y0, y1 + 1) - y
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > radius * radius] = 0.0
        window = fg[y0:y1 + 1, x0:x1 + 1]
        np.maximum(window, g, out=window)
    return Heatmap(fg, 1.0 - fg)


def encode_batch(landmark_sets, shape, sigma=1.0):
    """``N x 2 x H x W`` targets for a list of landmark sets."""
    return np.stack([encode(s, shape, sigma).stacked() for s in landmark_sets])


def _foreground(heatmap):
    if isinstance(heatmap, Heatmap):
        return heatmap.foreground
    a = np.asarray(heatmap, dtype=np.float64)
    if a.ndim == 3:
        # channel-first heatmap; only the foreground channel is used
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected an H x W foreground map, got shape {a.shape}")
    return a


def binarize(heatmap, threshold):
    return _foreground(heatmap) >= threshold


def count_regions(mask):
    """Number of 8-connected foreground components in a binary mask."""
    _, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT_CONNECTED)
    return int(n)


def decode(heatmap, threshold=0.5):
    """Threshold the foreground channel and return one centroid per region.

    Centroids are unweighted means of member pixel coordinates, returned as
    an ``(n, 2)`` array of ``(x, y)``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    mask = binarize(heatmap, threshold)
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return np.zeros((0, 2))
    rc = np.asarray(ndimage.center_of_mass(mask, labels, np.arange(1, n + 1)), dtype=np.float64)
    return rc[:, ::-1].copy()


def to_uint8(values):
    """Quantise a ``[0, 1]`` map for 8-bit grayscale export."""
    return np.round(255.0 * np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def save_png(values, path):
    from PIL import Image

    Image.fromarray(to_uint8(values)).save(path)


def load_heatmap(path):
    """Read a foreground map from ``.npy`` (lossless) or an 8-bit grayscale image."""
    path = str(path)
    if path.endswith(".npy"):
        return _foreground(np.load(path))
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
