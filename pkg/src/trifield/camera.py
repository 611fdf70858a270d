"""Pinhole camera model, SE(3) poses, ray generation and trajectory checks.

Conventions (fixed for the whole package): right-handed coordinates, the camera
looks down +z, image u grows right and v grows down, poses are camera-to-world.
Integer pixel coordinates are pixel centers, i.e. u = fx * x / z + cx exactly.
All geometry is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_TOL = 1e-9


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @staticmethod
    def from_fov(width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        """Centered principal point; fy = fx (square pixels)."""
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                          width=width, height=height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def in_bounds(self, u, v):
        """True where (u, v) rounds to a pixel inside the image."""
        return ((np.asarray(u) >= -0.5) & (np.asarray(u) < self.width - 0.5)
                & (np.asarray(v) >= -0.5) & (np.asarray(v) < self.height - 0.5))


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ValueError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation

    @property
    def viewing_direction(self) -> np.ndarray:
        """World-space optical axis (+z of the camera frame)."""
        return self.rotation[:, 2].copy()

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    @property
    def matrix_3x4(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class SphericalOffset:
    """Polar angle theta, azimuth phi (radians) and radius r (world units)."""

    theta: float
    phi: float
    r: float

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("radius must be nonnegative")
        if not (0.0 <= self.theta <= math.pi):
            raise ValueError("theta must lie in [0, pi]")
        if not (-math.pi <= self.phi <= math.pi):
            raise ValueError("phi must lie in [-pi, pi]")

    def to_cartesian(self) -> np.ndarray:
        """Offset vector in the local camera frame (z = optical axis)."""
        st = math.sin(self.theta)
        return self.r * np.array([st * math.cos(self.phi),
                                  st * math.sin(self.phi),
                                  math.cos(self.theta)])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > _TOL:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


DEFAULT_T_NEAR = 0.05
DEFAULT_T_FAR = 20.0


def pixel_directions(camera: Intrinsics, pose: Pose, pixels: np.ndarray) -> np.ndarray:
    """Unit world-space ray directions through continuous pixel coordinates (..., 2)."""
    px = np.asarray(pixels, dtype=np.float64)
    x = (px[..., 0] - camera.cx) / camera.fx
    y = (px[..., 1] - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return d_cam @ pose.rotation.T


def camera_ray_grid(camera: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(origin (3,), directions (H, W, 3)) for every pixel center of the image."""
    u, v = np.meshgrid(np.arange(camera.width, dtype=np.float64),
                       np.arange(camera.height, dtype=np.float64))
    dirs = pixel_directions(camera, pose, np.stack([u, v], axis=-1))
    return pose.center.copy(), dirs


def generate_rays(camera: Intrinsics, pose: Pose, pixels,
                  t_near: float = DEFAULT_T_NEAR, t_far: float = DEFAULT_T_FAR) -> list[Ray]:
    """One ray per continuous pixel coordinate, through the pixel center."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    inside = camera.in_bounds(px[:, 0], px[:, 1])
    if not np.all(inside):
        bad = px[~inside][0]
        raise ValueError(f"pixel {tuple(bad)} outside image bounds")
    dirs = pixel_directions(camera, pose, px)
    origin = pose.center
    return [Ray(origin, d, t_near, t_far) for d in dirs]


def project_point(camera: Intrinsics, pose: Pose, point) -> tuple[np.ndarray, float]:
    """Perspective projection; returns (pixel (2,), camera-frame depth z)."""
    p_cam = pose.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    z = float(p_cam[2])
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive camera depth {z}")
    u = camera.fx * p_cam[0] / z + camera.cx
    v = camera.fy * p_cam[1] / z + camera.cy
    return np.array([u, v]), z


def backproject_pixel(camera: Intrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    """World point at camera-frame depth `depth` behind pixel (u, v)."""
    if depth <= 0.0:
        raise ValueError("depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    p_cam = np.array([(u - camera.cx) / camera.fx * depth,
                      (v - camera.cy) / camera.fy * depth,
                      depth])
    return pose.to_world(p_cam)


def look_at_rotation(forward: np.ndarray, down_hint: np.ndarray) -> np.ndarray:
    """Rotation whose +z is `forward` and whose +y (image down) best matches `down_hint`."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    y_hint = np.asarray(down_hint, dtype=np.float64)
    x = np.cross(y_hint, z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        # forward parallel to the hint; fall back to an arbitrary orthogonal axis
        alt = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        x = np.cross(alt, z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def spherical_neighbor_pose(center_pose: Pose, offset: SphericalOffset,
                            look_at_distance: float) -> Pose:
    """Pose on a sphere of radius offset.r around center_pose's camera center.

    The new camera is re-aimed at a target placed `look_at_distance` along the
    original optical axis; with r = 0 the original pose is returned unchanged.
    """
    if look_at_distance <= 0:
        raise ValueError("look_at_distance must be positive")
    center = center_pose.center
    new_center = center + center_pose.rotation @ offset.to_cartesian()
    if offset.r == 0.0:
        return Pose(center_pose.rotation.copy(), center.copy())
    target = center + look_at_distance * center_pose.viewing_direction
    rotation = look_at_rotation(target - new_center, center_pose.rotation[:, 1])
    return Pose(rotation, new_center)


def validate_trajectory(poses: list[Pose], threshold: float = 0.95) -> list[bool]:
    """Per consecutive pair: cosine between the step and the viewing direction >= threshold.

    A zero-displacement pair counts as smooth (True).
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    flags = []
    for a, b in zip(poses[:-1], poses[1:]):
        step = b.center - a.center
        norm = np.linalg.norm(step)
        if norm == 0.0:
            flags.append(True)
            continue
        cos = float(step @ a.viewing_direction) / norm
        flags.append(cos >= threshold)
    return flags


def save_trajectory(path: str | Path, poses: list[Pose], header: str | None = None) -> None:
    """One pose per line: 12 whitespace-separated numbers, row-major [R|t]."""
    lines = []
    if header:
        lines.extend(f"# {line}" for line in header.splitlines())
    for pose in poses:
        lines.append(" ".join(repr(float(x)) for x in pose.matrix_3x4.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        vals = [float(tok) for tok in stripped.split()]
        if len(vals) != 12:
            raise ValueError(f"trajectory line {lineno}: expected 12 numbers, got {len(vals)}")
        m = np.array(vals).reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    return poses
