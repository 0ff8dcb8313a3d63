"""Random geometric and photometric augmentation of image/landmark pairs.

Geometric transforms move the landmark coordinates; label heatmaps are
re-encoded from the moved points afterwards rather than warped.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentConfig:
    apply_probability: float = 0.8
    rotation_deg: float = 60.0
    shift_frac: float = 0.10
    mask_shift_frac: float = 0.01
    shear: float = 0.1
    brightness_delta: float = 0.2
    contrast_range: tuple = (0.3, 0.5)
    saturation_range: tuple = (0.5, 2.0)
    hue_delta: float = 0.1
    flip_probability: float = 0.5

    def __post_init__(self):
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        self.saturation_range = tuple(float(v) for v in self.saturation_range)
        for name in ("apply_probability", "flip_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self):
        d = asdict(self)
        d["contrast_range"] = list(self.contrast_range)
        d["saturation_range"] = list(self.saturation_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ----------------------------------------------------------------------
# affine helpers (2x3 matrices acting on (x, y))


def _h(m):
    out = np.eye(3)
    out[:2] = m
    return out


def compose(*mats):
    """Matrix that applies ``mats[-1]`` first and ``mats[0]`` last."""
    acc = np.eye(3)
    for m in mats:
        acc = acc @ _h(m)
    return acc[:2]


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]])


def rotation(angle_rad, center=(0.0, 0.0)):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    r = np.array([[c, -s, 0.0], [s, c, 0.0]])
    cx, cy = center
    return compose(translation(cx, cy), r, translation(-cx, -cy))


def shear_matrix(shear, center=(0.0, 0.0)):
    m = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0]])
    cx, cy = center
    return compose(translation(cx, cy), m, translation(-cx, -cy))


def affine_point(point, matrix):
    """Apply a 2x3 affine matrix to one ``(x, y)`` point or an ``(n, 2)`` array."""
    p = np.asarray(point, dtype=np.float64)
    m = np.asarray(matrix, dtype=np.float64)
    return p @ m[:, :2].T + m[:, 2]


def warp_image(image, matrix, order=1):
    """Warp an ``H x W [x C]`` image so that source point p lands on ``matrix @ p``."""
    inv = np.linalg.inv(_h(matrix))
    # ndimage works in (row, col) = (y, x)
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    inv_rc = swap @ inv @ swap
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return ndimage.affine_transform(image, inv_rc[:2, :2], offset=inv_rc[:2, 2], order=order,
                                        mode="constant", cval=0.0)
    return np.stack(
        [ndimage.affine_transform(image[..., c], inv_rc[:2, :2], offset=inv_rc[:2, 2], order=order,
                                  mode="constant", cval=0.0)
         for c in range(image.shape[2])],
        axis=-1,
    )


def random_affine(shape, config, rng):
    """Sample rotation about the image centre, shift and shear."""
    h, w = shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    angle = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg))
    tx = rng.uniform(-config.shift_frac, config.shift_frac) * w
    ty = rng.uniform(-config.shift_frac, config.shift_frac) * h
    sh = rng.uniform(-config.shear, config.shear)
    return compose(translation(tx, ty), rotation(angle, center), shear_matrix(sh, center))


# ----------------------------------------------------------------------
# photometric ops on H x W x 3 images in [0, 1]


def adjust_brightness(image, delta):
    return np.clip(image + delta, 0.0, 1.0)


def adjust_contrast(image, factor):
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip(mean + factor * (image - mean), 0.0, 1.0)


def adjust_saturation(image, factor):
    from skimage.color import hsv2rgb, rgb2hsv

    hsv = rgb2hsv(image)
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    return np.clip(hsv2rgb(hsv), 0.0, 1.0)


def adjust_hue(image, delta):
    """Rotate hue by ``delta`` turns of the colour circle."""
    from skimage.color import hsv2rgb, rgb2hsv

    hsv = rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + delta, 1.0)
    return np.clip(hsv2rgb(hsv), 0.0, 1.0)


def flip_points(points, shape, horizontal):
    h, w = shape
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    if horizontal:
        p[:, 0] = (w - 1) - p[:, 0]
    else:
        p[:, 1] = (h - 1) - p[:, 1]
    return p


def _inside(points, shape):
    h, w = shape
    return (points[:, 0] >= 0) & (points[:, 0] < w) & (points[:, 1] >= 0) & (points[:, 1] < h)


def augment(image, landmarks, config, rng):
    """Return an augmented copy of ``(image, landmarks)``.

    With probability ``apply_probability`` a random affine warp, landmark
    jitter and colour jitter are applied.  Horizontal and vertical flips are
    drawn independently, each with ``flip_probability``.  Landmarks that end
    up outside the frame are dropped.
    """
    image = np.asarray(image, dtype=np.float64)
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    shape = image.shape[:2]
    h, w = shape

    if rng.random() < config.apply_probability:
        m = random_affine(shape, config, rng)
        image = warp_image(image, m)
        pts = affine_point(pts, m)
        jitter = rng.uniform(-config.mask_shift_frac, config.mask_shift_frac, size=pts.shape)
        pts = pts + jitter * np.array([w, h])

        brightness = rng.uniform(-config.brightness_delta, config.brightness_delta)
        contrast = rng.uniform(*config.contrast_range)
        saturation = rng.uniform(*config.saturation_range)
        hue = rng.uniform(-config.hue_delta, config.hue_delta)
        image = adjust_brightness(image, brightness)
        image = adjust_contrast(image, contrast)
        if image.ndim == 3 and image.shape[2] == 3:
            image = adjust_saturation(image, saturation)
            image = adjust_hue(image, hue)
    else:
        image = image.copy()

    if rng.random() < config.flip_probability:
        image = image[:, ::-1].copy()
        pts = flip_points(pts, shape, horizontal=True)
    if rng.random() < config.flip_probability:
        image = image[::-1].copy()
        pts = flip_points(pts, shape, horizontal=False)

    pts = pts[_inside(pts, shape)]
    return image, pts
