"""Image helpers: validation, bilinear crop/resize and PNG export.

Images are ``numpy`` arrays of shape ``(height, width, 3)`` holding values in
``[0, 1]``. Row 0 is the top of the picture.
"""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np

CropWindow = Tuple[int, int, int, int]  # (x0, y0, w, h) in pixels


class ImageShapeError(ValueError):
    pass


def check_image(img: np.ndarray, size: Tuple[int, int] | None = None) -> np.ndarray:
    """Validate an image array; ``size`` is ``(width, height)`` if given."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageShapeError(f"expected (H, W, 3) image, got shape {img.shape}")
    if size is not None and (img.shape[1], img.shape[0]) != tuple(size):
        raise ImageShapeError(
            f"expected {size[0]}x{size[1]} image, got {img.shape[1]}x{img.shape[0]}")
    return img


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no antialias prefilter).

    ``out_size`` is ``(width, height)``. Rows are interpolated first, then
    columns, in float64.
    """
    out_w, out_h = out_size
    if out_w <= 0 or out_h <= 0:
        raise ValueError("output size must be positive")
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    if (w, h) == (out_w, out_h):
        return src.copy()
    lo, hi, f = _bilinear_taps(h, out_h)
    rows = src[lo] * (1.0 - f)[:, None, None] + src[hi] * f[:, None, None]
    lo, hi, f = _bilinear_taps(w, out_w)
    return rows[:, lo] * (1.0 - f)[None, :, None] + rows[:, hi] * f[None, :, None]


def crop(img: np.ndarray, window: CropWindow) -> np.ndarray:
    x0, y0, w, h = window
    H, W = img.shape[:2]
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
        raise ImageShapeError(f"crop window {tuple(window)} outside {W}x{H} image")
    return img[y0:y0 + h, x0:x0 + w]


def crop_resize(img: np.ndarray, window: CropWindow, out_size: Tuple[int, int]) -> np.ndarray:
    """Pixel-exact crop followed by bilinear resize, returned as float32."""
    return resize_bilinear(crop(img, window), out_size).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(check_image(np.asarray(img))), mode="RGB").save(path)
