"""Variable-count suture landmark detection.

A U-Net predicts a single foreground heatmap; thresholding it and taking
the centroid of each connected region yields any number of landmarks.
"""
from .estimator import HeatmapDecoder, HeatmapEncoder, SutureDetector
from .heatmap import decode, encode
from .unet import UNetConfig, build, param_count

__version__ = "0.1.0"

__all__ = [
    "SutureDetector", "HeatmapEncoder", "HeatmapDecoder",
    "encode", "decode", "UNetConfig", "build", "param_count",
]
