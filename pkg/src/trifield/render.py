"""Stratified ray sampling and the volume-rendering quadrature.

Per ray: alpha_i = 1 - exp(-sigma_i * delta_i), transmittance
T_i = exp(-sum_{j<i} sigma_j delta_j), weights w_i = T_i * alpha_i, and color /
depth / feature maps are weight sums over the per-sample decoder outputs. View
rendering composites a configurable background color (and the far plane, for
depth) with weight 1 - accumulated alpha, and blends multiple field blocks
per ray with weights proportional to accumulated alpha times the inverse
distance from the camera center to each block center.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .camera import Intrinsics, Pose, Ray, camera_ray_grid
from .field import TriPlaneField, field_query


class NonFiniteDensityError(RuntimeError):
    pass


@dataclass(frozen=True)
class RaySamples:
    """Strictly increasing distances t with spacings delta (the last spacing
    closes the interval to t_far) and the corresponding 3D positions."""

    t: torch.Tensor
    delta: torch.Tensor
    positions: torch.Tensor

    def __post_init__(self):
        if torch.any(self.t[1:] <= self.t[:-1]):
            raise ValueError("sample distances must be strictly increasing")
        if torch.any(self.delta <= 0):
            raise ValueError("sample spacings must be positive")


@dataclass(frozen=True)
class QuadratureResult:
    color: torch.Tensor
    depth: torch.Tensor
    feature: torch.Tensor
    weights: torch.Tensor
    accumulated_alpha: torch.Tensor


def stratified_t(n: int, t_near: float, t_far: float, batch: int,
                 generator: torch.Generator | None = None, jitter: bool = True,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(batch, n) distances: one uniform draw per equal bin of [t_near, t_far];
    bin midpoints when jitter is off."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    edges = torch.linspace(t_near, t_far, n + 1, dtype=dtype)[:-1]
    width = (t_far - t_near) / n
    if jitter:
        u = torch.rand(batch, n, generator=generator, dtype=dtype)
    else:
        u = torch.full((batch, n), 0.5, dtype=dtype)
    return edges + u * width


def stratified_samples(ray: Ray, n: int, generator: torch.Generator | None = None,
                       jitter: bool = True,
                       dtype: torch.dtype = torch.float64) -> RaySamples:
    """Stratified samples along a single ray; deterministic given the generator."""
    t = stratified_t(n, ray.t_near, ray.t_far, 1, generator, jitter, dtype)[0]
    delta = torch.empty_like(t)
    delta[:-1] = t[1:] - t[:-1]
    delta[-1] = ray.t_far - t[-1]
    origin = torch.as_tensor(ray.origin, dtype=dtype)
    direction = torch.as_tensor(ray.direction, dtype=dtype)
    return RaySamples(t=t, delta=delta, positions=origin + t[:, None] * direction)


def quadrature(sigma: torch.Tensor, color: torch.Tensor, feature: torch.Tensor,
               t: torch.Tensor, delta: torch.Tensor) -> QuadratureResult:
    """Alpha-compositing quadrature over (..., N) samples."""
    if not torch.isfinite(sigma).all():
        bad = (~torch.isfinite(sigma)).nonzero()[0]
        raise NonFiniteDensityError(f"non-finite density at sample index {bad.tolist()}")
    optical = sigma * delta
    alpha = 1.0 - torch.exp(-optical)
    # transmittance before each sample: exclusive prefix sum of optical depths
    accum = torch.cumsum(optical, dim=-1)
    transmittance = torch.exp(-(accum - optical))
    weights = transmittance * alpha
    out_color = (weights[..., None] * color).sum(dim=-2)
    out_depth = (weights * t).sum(dim=-1)
    out_feature = (weights[..., None] * feature).sum(dim=-2)
    return QuadratureResult(color=out_color, depth=out_depth, feature=out_feature,
                            weights=weights, accumulated_alpha=weights.sum(dim=-1))


def render_ray(field: TriPlaneField, ray: Ray, samples: RaySamples) -> QuadratureResult:
    direction = torch.as_tensor(ray.direction, dtype=field.dtype)
    positions = samples.positions.to(field.dtype)
    n = positions.shape[0]
    sigma, g, color = field_query(field, positions, direction.expand(n, 3))
    return quadrature(sigma, color, g,
                      samples.t.to(field.dtype), samples.delta.to(field.dtype))


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    t_near: float = 0.05
    t_far: float = 20.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter: bool = False
    chunk_size: int = 1024

    def evaluation(self) -> "RenderConfig":
        return replace(self, jitter=False)


def render_ray_batch(field: TriPlaneField, origins: torch.Tensor, dirs: torch.Tensor,
                     cfg: RenderConfig,
                     generator: torch.Generator | None = None) -> QuadratureResult:
    """Quadrature for a (B, 3) batch of rays against one field block."""
    batch = origins.shape[0]
    t = stratified_t(cfg.n_samples, cfg.t_near, cfg.t_far, batch, generator,
                     cfg.jitter, dtype=field.dtype)
    delta = torch.empty_like(t)
    delta[..., :-1] = t[..., 1:] - t[..., :-1]
    delta[..., -1] = cfg.t_far - t[..., -1]
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    n = cfg.n_samples
    sigma, g, color = field_query(field, positions.reshape(-1, 3),
                                  dirs[:, None, :].expand(batch, n, 3).reshape(-1, 3))
    return quadrature(sigma.reshape(batch, n), color.reshape(batch, n, 3),
                      g.reshape(batch, n, -1), t, delta)


def blend_blocks(results: list[QuadratureResult], inv_dist: list[float]):
    """Per-ray convex combination of block renders, weight ∝ alpha * inv_dist."""
    stacked_alpha = torch.stack([r.accumulated_alpha for r in results])
    w = stacked_alpha * torch.as_tensor(inv_dist, dtype=stacked_alpha.dtype)[:, None]
    total = w.sum(dim=0)
    norm = torch.where(total > 1e-12, w / total.clamp(min=1e-12), torch.zeros_like(w))
    color = (norm[..., None] * torch.stack([r.color for r in results])).sum(dim=0)
    depth = (norm * torch.stack([r.depth for r in results])).sum(dim=0)
    feature = (norm[..., None] * torch.stack([r.feature for r in results])).sum(dim=0)
    alpha = (norm * stacked_alpha).sum(dim=0)
    return color, depth, feature, alpha


@dataclass
class ViewRender:
    image: np.ndarray    # (H, W, 3), background composited
    depth: np.ndarray    # (H, W), far plane composited
    feature: np.ndarray  # (H, W, hidden)
    alpha: np.ndarray    # (H, W)


def render_view(blocks: TriPlaneField | list[TriPlaneField], pose: Pose,
                camera: Intrinsics, cfg: RenderConfig,
                generator: torch.Generator | None = None) -> ViewRender:
    """Per-pixel rendering of one view from one or more field blocks."""
    if isinstance(blocks, TriPlaneField):
        blocks = [blocks]
    if not blocks:
        raise ValueError("need at least one field block")
    dtype = blocks[0].dtype
    origin_np, dirs_np = camera_ray_grid(camera, pose)
    h, w = dirs_np.shape[:2]
    dirs = torch.as_tensor(dirs_np.reshape(-1, 3), dtype=dtype)
    origin = torch.as_tensor(origin_np, dtype=dtype).expand_as(dirs)
    inv_dist = [1.0 / max(float(np.linalg.norm(origin_np - b.bounds.center)), 1e-6)
                for b in blocks]

    hidden = blocks[0].decoder.hidden
    image = torch.empty(h * w, 3, dtype=dtype)
    depth = torch.empty(h * w, dtype=dtype)
    feature = torch.empty(h * w, hidden, dtype=dtype)
    alpha = torch.empty(h * w, dtype=dtype)
    background = torch.as_tensor(cfg.background, dtype=dtype)
    with torch.no_grad():
        for start in range(0, h * w, cfg.chunk_size):
            sel = slice(start, min(start + cfg.chunk_size, h * w))
            results = [render_ray_batch(block, origin[sel], dirs[sel], cfg, generator)
                       for block in blocks]
            color_c, depth_c, feature_c, alpha_c = blend_blocks(results, inv_dist)
            image[sel] = color_c + (1.0 - alpha_c[:, None]) * background
            depth[sel] = depth_c + (1.0 - alpha_c) * cfg.t_far
            feature[sel] = feature_c
            alpha[sel] = alpha_c
    return ViewRender(image=image.reshape(h, w, 3).numpy().astype(np.float64),
                      depth=depth.reshape(h, w).numpy().astype(np.float64),
                      feature=feature.reshape(h, w, hidden).numpy(),
                      alpha=alpha.reshape(h, w).numpy().astype(np.float64))
