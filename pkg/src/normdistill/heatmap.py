"""Heatmap overlay rendering and the lossless raw score-map dump.

Overlays use a fixed global normalization scale (6.0, the theoretical pixel
score maximum), never per-image min-max, so intensities are comparable across
images. The raw dump is little-endian float32, row-major, with a small
dimension header, and round-trips bit-exactly.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .scoring import AnomalyResult

SCORE_SCALE = 6.0
RAW_MAGIC = b"NDM1"


def save_raw_map(pixel_map: np.ndarray, path) -> None:
    """Write a 2D float32 map: magic, uint32 height, uint32 width, row-major data."""
    arr = np.ascontiguousarray(pixel_map, dtype="<f4")
    if arr.ndim != 2:
        raise InputError(f"raw map must be 2D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_raw_map(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read raw map {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != RAW_MAGIC:
        raise InputError(f"{path} is not a raw score map")
    h, w = struct.unpack("<II", blob[4:12])
    data = blob[12:]
    if len(data) != 4 * h * w:
        raise InputError(f"raw map {path} is truncated")
    return np.frombuffer(data, dtype="<f4").reshape(h, w).copy()


def _colormap(v: np.ndarray) -> np.ndarray:
    """Linear blue-to-red map; channel sum is constant, so blended overlay
    brightness stays monotone in the score on a dark background."""
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def render_overlay(pixel_map: np.ndarray, image: np.ndarray, alpha: float = 0.6,
                   scale: float = SCORE_SCALE) -> np.ndarray:
    """Blend the score map over the image; weight alpha * (score / scale).

    A zero score map returns the image unchanged; a map peaking at scale/2
    renders at half blend weight, not full.
    """
    if pixel_map.shape != image.shape[:2]:
        raise InputError(
            f"map shape {pixel_map.shape} != image shape {image.shape[:2]}")
    v = np.clip(np.asarray(pixel_map, dtype=np.float64) / scale, 0.0, 1.0)
    weight = (alpha * v)[..., None]
    blended = (1.0 - weight) * np.asarray(image, dtype=np.float64) + weight * _colormap(v)
    return np.clip(blended, 0.0, 1.0)


def export_heatmap(result: AnomalyResult, image, path, alpha: float = 0.6,
                   raw_path=None) -> Path:
    """Write the overlay PNG (and optionally the lossless raw map).

    Args:
        result: anomaly result whose pixel_map matches the image resolution.
        image: (H, W, 3) float array/tensor in [0, 1] (e.g. ImageSample.pixels).
        path: output PNG path.
        raw_path: optional raw float32 dump path.
    """
    img = np.asarray(image, dtype=np.float64)
    overlay = render_overlay(result.pixel_map, img, alpha=alpha)
    out = Path(path)
    try:
        Image.fromarray(np.round(overlay * 255.0).astype(np.uint8)).save(out, format="PNG")
    except OSError as exc:
        raise InputError(f"cannot write heatmap {out}: {exc}") from exc
    if raw_path is not None:
        save_raw_map(result.pixel_map, raw_path)
    return out


__all__ = ["SCORE_SCALE", "save_raw_map", "load_raw_map", "render_overlay", "export_heatmap"]
