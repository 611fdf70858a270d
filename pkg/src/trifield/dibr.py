"""Differentiable-style depth-image-based rendering: forward-warp a keyframe
into a novel view with a z-buffer, splat footprints to close cracks, fill the
remaining holes, and assemble the supporting view database around an initial
keyframe.

Warping reprojects every valid source pixel through its depth:
back-project with K^-1, move to the target camera frame, project with K, then
normalize by the third (depth) coordinate. Landing positions are rounded to the
nearest pixel before z-buffering; ties go to the smaller source pixel index so
results are schedule-independent.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from abc import ABC, abstractmethod

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, Pose, spherical_neighbor_pose, SphericalOffset


class HoleFillError(RuntimeError):
    pass


@dataclass(frozen=True)
class Keyframe:
    """One supporting view: color image, z-depth map, camera-to-world pose and
    per-pixel validity."""

    image: np.ndarray
    depth: np.ndarray
    pose: Pose
    valid_mask: np.ndarray

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {image.shape}")
        if depth.shape != image.shape[:2] or mask.shape != image.shape[:2]:
            raise ValueError("image, depth and valid_mask dimensions disagree")
        if image.min() < -1e-12 or image.max() > 1 + 1e-12:
            raise ValueError("image values must lie in [0, 1]")
        if np.any(~(depth[mask] > 0)):
            raise ValueError("depth must be positive wherever valid")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class WarpResult:
    """Forward-warp output on the target grid.

    hole_mask marks target pixels no source pixel landed on; their depth is
    +inf and their flow is NaN. `flow` stores, at each covered target pixel,
    the source→target displacement of the z-buffer winner; `source_flow` keeps
    the continuous (pre-rounding) displacement per source pixel, NaN where the
    source pixel was invalid or reprojected behind the camera.
    """

    image: np.ndarray
    depth: np.ndarray
    hole_mask: np.ndarray
    flow: np.ndarray
    source_flow: np.ndarray


def warp(source: Keyframe, target_pose: Pose, camera: Intrinsics) -> WarpResult:
    """Forward-warp `source` into `target_pose` under shared intrinsics."""
    h, w = source.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    usable = source.valid_mask & np.isfinite(source.depth)
    ys, xs = np.nonzero(usable)
    depth = source.depth[ys, xs]

    x_cam = (xs - camera.cx) / camera.fx * depth
    y_cam = (ys - camera.cy) / camera.fy * depth
    pts_world = source.pose.to_world(np.stack([x_cam, y_cam, depth], axis=-1))
    pts_tgt = target_pose.to_camera(pts_world)
    z = pts_tgt[:, 2]

    source_flow = np.full((h, w, 2), np.nan)
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u_t = camera.fx * pts_tgt[:, 0] / z + camera.cx
        v_t = camera.fy * pts_tgt[:, 1] / z + camera.cy
    source_flow[ys[front], xs[front], 0] = (u_t - xs)[front]
    source_flow[ys[front], xs[front], 1] = (v_t - ys)[front]

    ui = np.rint(u_t).astype(np.int64)
    vi = np.rint(v_t).astype(np.int64)
    landed = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)

    image = np.zeros((h, w, 3))
    depth_out = np.full((h, w), np.inf)
    flow = np.full((h, w, 2), np.nan)
    hole_mask = np.ones((h, w), dtype=bool)
    if np.any(landed):
        src_lin = ys[landed] * w + xs[landed]
        tgt_lin = vi[landed] * w + ui[landed]
        z_l = z[landed]
        # z-buffer: per target pixel keep the nearest sample, ties by source index
        order = np.lexsort((src_lin, z_l, tgt_lin))
        tgt_sorted = tgt_lin[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
        win = order[first]
        tw = tgt_lin[win]
        sw = src_lin[win]
        image.reshape(-1, 3)[tw] = source.image.reshape(-1, 3)[sw]
        depth_out.reshape(-1)[tw] = z_l[win]
        flow.reshape(-1, 2)[tw] = source_flow.reshape(-1, 2)[sw]
        hole_mask.reshape(-1)[tw] = False
    return WarpResult(image=image, depth=depth_out, hole_mask=hole_mask,
                      flow=flow, source_flow=source_flow)


def splat_footprint(warped: WarpResult, radius: int) -> WarpResult:
    """Grow every landed sample to a (2r+1)^2 neighborhood.

    Covered pixels keep the sample the warp already z-buffered onto them; the
    footprint competes only for hole pixels, where the nearest-depth candidate
    wins (ties by neighbor offset in row-major order). Radius 0 is the
    identity; holes shrink monotonically and no target depth ever increases.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius == 0:
        return warped
    h, w = warped.depth.shape
    offsets = [(dy, dx)
               for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1)]
    depth_stack = np.full((len(offsets), h, w), np.inf)
    for k, (dy, dx) in enumerate(offsets):
        src = depth_stack[k]
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        ys_from = slice(max(-dy, 0), h + min(-dy, 0))
        xs_from = slice(max(-dx, 0), w + min(-dx, 0))
        src[ys, xs] = warped.depth[ys_from, xs_from]
    pick = np.argmin(depth_stack, axis=0)  # first minimum resolves ties
    best = np.take_along_axis(depth_stack, pick[None], axis=0)[0]
    hole = ~np.isfinite(best)

    image = warped.image.copy()
    depth = warped.depth.copy()
    flow = warped.flow.copy()
    grow = warped.hole_mask & ~hole
    for k, (dy, dx) in enumerate(offsets):
        sel = grow & (pick == k)
        if not np.any(sel):
            continue
        yy, xx = np.nonzero(sel)
        image[yy, xx] = warped.image[yy - dy, xx - dx]
        depth[yy, xx] = best[yy, xx]
        flow[yy, xx] = warped.flow[yy - dy, xx - dx]
    return WarpResult(image=image, depth=depth, hole_mask=hole,
                      flow=flow, source_flow=warped.source_flow)


class HoleFiller(ABC):
    """Fills target pixels the warp left uncovered."""

    @abstractmethod
    def fill(self, warped: WarpResult, pose: Pose,
             camera: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
        """Return (image, depth) with every hole pixel assigned."""


class ConstantHoleFiller(HoleFiller):
    def __init__(self, color=(0.5, 0.5, 0.5), depth: float = 1.0):
        self.color = np.asarray(color, dtype=np.float64)
        self.depth = float(depth)

    def fill(self, warped, pose, camera):
        image = warped.image.copy()
        depth = warped.depth.copy()
        image[warped.hole_mask] = self.color
        depth[warped.hole_mask] = self.depth
        return image, depth


class NearestHoleFiller(HoleFiller):
    """Copy each hole from its nearest covered pixel (Euclidean distance)."""

    def fill(self, warped, pose, camera):
        if np.all(warped.hole_mask):
            raise HoleFillError("no covered pixels to fill from")
        _, (iy, ix) = ndimage.distance_transform_edt(warped.hole_mask, return_indices=True)
        return warped.image[iy, ix], warped.depth[iy, ix]


class OracleHoleFiller(HoleFiller):
    """Fill holes from the synthetic oracle's exact render of the target pose."""

    def __init__(self, scene):
        self.scene = scene

    def fill(self, warped, pose, camera):
        from .synth import render_oracle

        oracle = render_oracle(self.scene, pose, camera)
        image = np.where(warped.hole_mask[..., None], oracle.image, warped.image)
        depth = np.where(warped.hole_mask, oracle.depth, warped.depth)
        return image, depth


def build_supporting_database(initial: Keyframe, camera: Intrinsics,
                              offsets: list[SphericalOffset], filler: HoleFiller,
                              footprint_radius: int = 1,
                              look_at_distance: float | None = None) -> list[Keyframe]:
    """Initial keyframe plus one warped-and-filled keyframe per spherical offset.

    Neighbor cameras are re-aimed at a point `look_at_distance` along the
    initial optical axis (default: 2x the mean valid depth).
    """
    if not offsets:
        raise ValueError("offsets must be non-empty")
    if look_at_distance is None:
        finite = initial.valid_mask & np.isfinite(initial.depth)
        if not np.any(finite):
            raise ValueError("initial keyframe has no finite depth to aim at")
        look_at_distance = 2.0 * float(initial.depth[finite].mean())
    keyframes = [initial]
    for index, offset in enumerate(offsets):
        pose = spherical_neighbor_pose(initial.pose, offset, look_at_distance)
        warped = splat_footprint(warp(initial, pose, camera), footprint_radius)
        try:
            image, depth = filler.fill(warped, pose, camera)
        except Exception as exc:
            raise HoleFillError(f"hole filling failed for offset {index}") from exc
        keyframes.append(Keyframe(image=np.clip(image, 0.0, 1.0), depth=depth, pose=pose,
                                  valid_mask=np.ones(initial.shape, dtype=bool)))
    return keyframes


@dataclass(frozen=True)
class ConsistencyResidual:
    value: float
    overlap: int


def consistency_residual(rendered: np.ndarray, rendered_mask: np.ndarray,
                         warped: WarpResult) -> ConsistencyResidual:
    """Mean squared color difference between a global render and a warped local
    view, over pixels valid in both; zero with overlap 0 when masks are disjoint."""
    rendered = np.asarray(rendered, dtype=np.float64)
    mask = np.asarray(rendered_mask, dtype=bool)
    if rendered.shape[:2] != warped.image.shape[:2] or mask.shape != rendered.shape[:2]:
        raise ValueError("resolution mismatch between render and warp")
    both = mask & ~warped.hole_mask
    count = int(both.sum())
    if count == 0:
        return ConsistencyResidual(0.0, 0)
    diff = rendered[both] - warped.image[both]
    return ConsistencyResidual(float(np.mean(np.sum(diff**2, axis=-1)) / 3.0), count)
