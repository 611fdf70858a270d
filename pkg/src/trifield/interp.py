"""Bilinear resampling of image-like arrays at continuous pixel coordinates."""
from __future__ import annotations

import numpy as np


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample (H, W[, C]) at continuous (u, v) positions (..., 2).

    Returns (values, support_mask); support_mask is True where all four
    neighbors lie inside the image. Out-of-range samples are edge-clamped.
    """
    img = np.asarray(image, dtype=np.float64)
    scalar = img.ndim == 2
    if scalar:
        img = img[..., None]
    h, w = img.shape[:2]
    uv = np.asarray(uv, dtype=np.float64)
    u = uv[..., 0]
    v = uv[..., 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(u, dtype=np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(v, dtype=np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]

    with np.errstate(invalid="ignore"):  # 0 * inf at holes is a valid "no data"
        val = ((1 - fu) * (1 - fv) * img[v0, u0]
               + fu * (1 - fv) * img[v0, u1]
               + (1 - fu) * fv * img[v1, u0]
               + fu * fv * img[v1, u1])
    if scalar:
        val = val[..., 0]
    return val, inside
