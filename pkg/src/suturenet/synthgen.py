"""Deterministic synthetic suture phantom frames with exact ground truth.

A frame is a tissue-coloured radial gradient with low-frequency texture,
an elliptical annulus band, suture entry dots (small Gaussian spots with
a short strand tail) placed along the annulus, and distractors: bright
specular ellipses and grey tool strokes.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import dataio

COLOR_MODES = ("green", "white", "mixed")
PLACEMENT_RETRIES = 2000


class PlacementError(RuntimeError):
    """Sutures could not be placed under the separation constraint."""


@dataclass
class PhantomConfig:
    width: int = 512
    height: int = 288
    sutures: tuple = (8, 16)
    min_separation: float = 10.0
    color_mode: str = "mixed"
    n_specular: int = 2
    n_tool_strokes: int = 1
    noise: float = 0.02
    seed: int = 0
    dot_sigma: tuple = (1.5, 2.5)
    margin: float = 6.0

    def __post_init__(self):
        self.sutures = tuple(int(v) for v in self.sutures)
        self.dot_sigma = tuple(float(v) for v in self.dot_sigma)
        lo, hi = self.sutures
        if lo < 0 or hi < lo:
            raise ValueError(f"suture range must satisfy 0 <= lo <= hi, got {self.sutures}")
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"color_mode must be one of {COLOR_MODES}, got {self.color_mode!r}")
        if self.n_specular < 0 or self.n_tool_strokes < 0:
            raise ValueError("distractor counts must be non-negative")
        if self.min_separation < 0:
            raise ValueError("min_separation must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["sutures"] = list(self.sutures)
        d["dot_sigma"] = list(self.dot_sigma)
        return d


@dataclass
class SurgeryStyle:
    """Appearance parameters held fixed for all frames of one surgery."""

    hue: float
    saturation: float
    value: float
    lighting: float
    ring_center: tuple
    ring_axes: tuple
    texture_strength: float


def surgery_style(config, surgery_index):
    rng = np.random.default_rng([config.seed, 7919, surgery_index])
    return SurgeryStyle(
        hue=float(np.mod(rng.uniform(-0.06, 0.08), 1.0)),
        saturation=float(rng.uniform(0.45, 0.75)),
        value=float(rng.uniform(0.45, 0.7)),
        lighting=float(rng.uniform(0.2, 0.5)),
        ring_center=(float(rng.uniform(0.4, 0.6)), float(rng.uniform(0.4, 0.6))),
        ring_axes=(float(rng.uniform(0.25, 0.35)), float(rng.uniform(0.28, 0.4))),
        texture_strength=float(rng.uniform(0.05, 0.15)),
    )


def _value_noise(rng, shape, cells):
    h, w = shape
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    rows = np.linspace(0, cells, h)
    cols = np.linspace(0, cells, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(grid, [rr, cc], order=1)


def _place_sutures(rng, config, style, count):
    w, h = config.width, config.height
    cx, cy = style.ring_center[0] * w, style.ring_center[1] * h
    ax, ay = style.ring_axes[0] * w, style.ring_axes[1] * h
    pts = []
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > PLACEMENT_RETRIES * max(count, 1):
            raise PlacementError(
                f"could only place {len(pts)} of {count} sutures with separation {config.min_separation}"
            )
        theta = rng.uniform(0.0, 2.0 * np.pi)
        r = rng.normal(1.0, 0.06)
        x = cx + r * ax * np.cos(theta)
        y = cy + r * ay * np.sin(theta)
        if not (config.margin <= x < w - config.margin and config.margin <= y < h - config.margin):
            continue
        if pts and np.min(np.hypot(*(np.asarray(pts) - (x, y)).T)) < config.min_separation:
            continue
        pts.append((x, y))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def _splat(canvas, color, weight):
    canvas *= 1.0 - weight[..., None]
    canvas += weight[..., None] * np.asarray(color)[None, None, :]


def _suture_color(rng, mode):
    if mode == "mixed":
        mode = "green" if rng.random() < 0.5 else "white"
    if mode == "green":
        return np.array([0.1, rng.uniform(0.65, 0.85), 0.25])
    return np.full(3, rng.uniform(0.88, 0.97))


def render_frame(config, style, rng, landmarks):
    w, h = config.width, config.height
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.array(colorsys.hsv_to_rgb(style.hue, style.saturation, style.value))
    cx, cy = style.ring_center[0] * w, style.ring_center[1] * h
    rad = np.hypot((xx - cx) / w, (yy - cy) / h)
    shade = 1.0 + style.lighting * (0.5 - 2.0 * rad)
    tex = style.texture_strength * _value_noise(rng, (h, w), 6)
    img = base[None, None, :] * (shade + tex)[..., None]

    # darker annulus band along the suture ellipse
    ax, ay = style.ring_axes[0] * w, style.ring_axes[1] * h
    ell = np.hypot((xx - cx) / ax, (yy - cy) / ay)
    band = np.exp(-((ell - 1.0) / 0.08) ** 2)
    img *= (1.0 - 0.25 * band)[..., None]

    for _ in range(config.n_tool_strokes):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        ang = rng.uniform(0, np.pi)
        d = np.abs((xx - x0) * np.sin(ang) - (yy - y0) * np.cos(ang))
        weight = 0.8 * np.clip(1.0 - (d - rng.uniform(3, 8)), 0.0, 1.0)
        _splat(img, np.full(3, rng.uniform(0.35, 0.6)), weight)

    for _ in range(config.n_specular):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        sa, sb = rng.uniform(4.0, 9.0), rng.uniform(1.5, 3.0)
        ang = rng.uniform(0, np.pi)
        u = (xx - x0) * np.cos(ang) + (yy - y0) * np.sin(ang)
        v = -(xx - x0) * np.sin(ang) + (yy - y0) * np.cos(ang)
        weight = 0.95 * np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2))
        _splat(img, np.ones(3), weight)

    lo_s, hi_s = config.dot_sigma
    for x, y in landmarks:
        color = _suture_color(rng, config.color_mode)
        sigma = rng.uniform(lo_s, hi_s)
        # strand tail leaving the entry point
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(6.0, 12.0)
        t = np.clip((xx - x) * np.cos(ang) + (yy - y) * np.sin(ang), 0.0, length)
        px, py = x + t * np.cos(ang), y + t * np.sin(ang)
        d2 = (xx - px) ** 2 + (yy - py) ** 2
        tail = 0.55 * np.exp(-d2 / (2 * 0.7 ** 2))
        _splat(img, color, tail)
        dot = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))
        _splat(img, color, dot)

    img += rng.normal(0.0, config.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_frame(config, frame_index, style=None):
    """Render one frame; deterministic in ``(config.seed, frame_index)``.

    Returns ``(image, landmarks, annotation_text)`` where ``image`` is
    ``H x W x 3`` in ``[0, 1]`` and ``landmarks`` is ``(n, 2)`` of ``(x, y)``.
    """
    if style is None:
        style = surgery_style(config, 0)
    rng = np.random.default_rng([config.seed, frame_index])
    lo, hi = config.sutures
    count = int(rng.integers(lo, hi + 1))
    landmarks = _place_sutures(rng, config, style, count)
    image = render_frame(config, style, rng, landmarks)
    ann = dataio.annotation_from_points(landmarks, config.width, config.height)
    return image, landmarks, dataio.serialize_annotation(ann)


def generate_dataset(config, surgeries, frames_per_surgery, out_dir, domain="simulator"):
    """Write PNG frames, labelme annotations and ``manifest.json`` to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in range(surgeries):
        style = surgery_style(config, s)
        sid = f"surgery_{s:02d}"
        sdir = os.path.join(out_dir, sid)
        os.makedirs(sdir, exist_ok=True)
        for f in range(frames_per_surgery):
            index = s * frames_per_surgery + f
            image, landmarks, _ = generate_frame(config, index, style)
            stem = f"frame_{f:04d}"
            png_rel = f"{sid}/{stem}.png"
            json_rel = f"{sid}/{stem}.json"
            ann = dataio.annotation_from_points(landmarks, config.width, config.height,
                                                image_path=f"{stem}.png")
            try:
                dataio.save_image(image, os.path.join(out_dir, png_rel))
                with open(os.path.join(out_dir, json_rel), "w", encoding="utf-8") as fh:
                    fh.write(dataio.serialize_annotation(ann))
                    fh.write("\n")
            except OSError as exc:
                raise OSError(f"failed writing frame {png_rel} under {out_dir}: {exc}") from exc
            entries.append(dataio.ManifestEntry(png_rel, json_rel, sid, domain=domain, usage="cv"))
    manifest = dataio.DatasetManifest(
        entries=entries,
        root=os.path.abspath(out_dir),
        metadata={"generator": "phantom", "phantom": config.to_dict(),
                  "surgeries": surgeries, "frames_per_surgery": frames_per_surgery},
    )
    path = os.path.join(out_dir, "manifest.json")
    manifest.save(path)
    return manifest, path
