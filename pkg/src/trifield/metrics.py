"""Consistency and fidelity metrics that need no pretrained models: masked PSNR,
median-scaled relative depth error, and flow-warping error against analytic flow.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interp import bilinear_sample

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over masked pixels, images in [0, 1]; capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes disagree")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    if not np.any(mask):
        raise ValueError("empty mask")
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def depth_error(predicted: np.ndarray, reference: np.ndarray,
                mask: np.ndarray) -> float:
    """Scale-invariant depth error: both maps divided by their masked median,
    then the mean absolute relative difference |p - r| / r."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if predicted.shape != reference.shape or mask.shape != predicted.shape:
        raise ValueError("depth map shapes disagree")
    if mask.sum() < 2:
        raise ValueError("need at least 2 masked pixels")
    med_p = float(np.median(predicted[mask]))
    med_r = float(np.median(reference[mask]))
    if med_p == 0.0 or med_r == 0.0:
        raise ValueError("zero median depth")
    p = predicted[mask] / med_p
    r = reference[mask] / med_r
    return float(np.mean(np.abs(p - r) / r))


def flow_warp_error(frames: list[np.ndarray], flows: list[np.ndarray],
                    masks: list[np.ndarray]) -> float:
    """Mean over consecutive pairs of the masked MSE between frame t and frame
    t+1 pulled back through the flow.

    flows[t] lives on frame t's grid and maps pixels to their position in
    frame t+1; masks[t] excludes occluded/invalid pixels. Samples leaving the
    image are dropped.
    """
    if len(flows) != len(frames) - 1 or len(masks) != len(flows):
        raise ValueError("need one flow and mask per consecutive frame pair")
    errors = []
    for t, flow in enumerate(flows):
        a = np.asarray(frames[t], dtype=np.float64)
        b = np.asarray(frames[t + 1], dtype=np.float64)
        if a.shape != b.shape or flow.shape[:2] != a.shape[:2]:
            raise ValueError(f"resolution mismatch at pair {t}")
        h, w = a.shape[:2]
        u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                           np.arange(h, dtype=np.float64))
        uv = np.stack([u, v], axis=-1) + flow
        with np.errstate(invalid="ignore"):
            pulled, support = bilinear_sample(b, np.where(np.isfinite(uv), uv, -1.0))
        ok = np.asarray(masks[t], dtype=bool) & support & np.isfinite(flow).all(axis=-1)
        if not np.any(ok):
            continue
        errors.append(float(np.mean((pulled[ok] - a[ok]) ** 2)))
    return float(np.mean(errors)) if errors else 0.0


@dataclass
class MetricReport:
    psnr: float | None = None
    depth_error: float | None = None
    flow_warp_error: float | None = None
    psnr_per_frame: list[float] = field(default_factory=list)
    depth_error_per_frame: list[float] = field(default_factory=list)
    flow_warp_per_pair: list[float] = field(default_factory=list)
    pixel_count: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def to_flat(self) -> dict:
        flat: dict[str, float | int | str] = {"pixel_count": self.pixel_count}
        for name in ("psnr", "depth_error", "flow_warp_error"):
            value = getattr(self, name)
            flat[name] = "unavailable" if value is None else value
        for i, v in enumerate(self.psnr_per_frame):
            flat[f"psnr.{i:03d}"] = v
        for i, v in enumerate(self.depth_error_per_frame):
            flat[f"depth_error.{i:03d}"] = v
        for i, v in enumerate(self.flow_warp_per_pair):
            flat[f"flow_warp.{i:03d}"] = v
        for key in sorted(self.extras):
            flat[f"extra.{key}"] = self.extras[key]
        return flat

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), sort_keys=True, indent=1) + "\n")

    def format_table(self) -> str:
        rows = [("metric", "value")]
        for key, value in self.to_flat().items():
            rows.append((key, f"{value:.6f}" if isinstance(value, float) else str(value)))
        width = max(len(r[0]) for r in rows) + 2
        lines = [f"{key:<{width}}{value}" for key, value in rows]
        lines.insert(1, "-" * (width + 12))
        return "\n".join(lines)
