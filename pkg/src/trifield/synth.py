"""Procedural synthetic-scene oracle: analytic ray tracing of textured boxes and
spheres with Lambertian shading, plus exact optical flow between views.

Every test and acceptance run measures against this oracle, so everything here
is deterministic: textures come from a hash-based value-noise lattice and the
tracer is pure float64 numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .camera import Intrinsics, Pose

_EPS = 1e-9


# -- hash-based value noise ---------------------------------------------------

def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)).astype(np.uint64)
    return (z ^ (z >> np.uint64(31))).astype(np.uint64)


def _lattice(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, salt: int) -> np.ndarray:
    """Pseudo-random value in [0, 1) per integer lattice point."""
    key = (ix.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B185EBCA87)
           ^ iy.astype(np.int64).view(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
           ^ iz.astype(np.int64).view(np.uint64) * np.uint64(0x165667B19E3779F9)
           ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    return _splitmix(key).astype(np.float64) / float(2**64)


def value_noise(points: np.ndarray, salt: int) -> np.ndarray:
    """Smoothstep-interpolated value noise in [0, 1) at world points (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    base = np.floor(p)
    frac = p - base
    w = frac * frac * (3.0 - 2.0 * frac)
    ix, iy, iz = base[..., 0], base[..., 1], base[..., 2]
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _lattice(ix + dx, iy + dy, iz + dz, salt)
                weight = ((w[..., 0] if dx else 1 - w[..., 0])
                          * (w[..., 1] if dy else 1 - w[..., 1])
                          * (w[..., 2] if dz else 1 - w[..., 2]))
                out += corner * weight
    return out


# -- primitives ---------------------------------------------------------------

def _is_signed_permutation(r: np.ndarray) -> bool:
    return (np.all(np.isin(np.abs(r), (0.0, 1.0)))
            and np.allclose(r @ r.T, np.eye(3))
            and abs(np.linalg.det(r) - 1.0) < 1e-12)


@dataclass(frozen=True)
class Box:
    """Axis-aligned textured box. `frame` is a signed permutation carrying the
    texture's local axes so rigid scene transforms keep the texture attached."""

    center: tuple[float, float, float]
    half: tuple[float, float, float]
    color: tuple[float, float, float]
    seed: int = 0
    frame: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        c = np.asarray(self.center)
        h = np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (c - h - origin) * inv
            t_hi = (c + h - origin) * inv
        t1 = np.fmin(t_lo, t_hi)
        t2 = np.fmax(t_lo, t_hi)
        # parallel rays: axis constraint is +-inf from the division; fmin/fmax
        # ignore NaNs that arise when the origin sits exactly on a slab plane
        t_enter = np.max(t1, axis=-1)
        t_exit = np.min(t2, axis=-1)
        hit_outside = (t_enter <= t_exit) & (t_enter > _EPS)
        hit_inside = (t_enter <= t_exit) & (t_enter <= _EPS) & (t_exit > _EPS)
        t = np.where(hit_outside, t_enter, np.where(hit_inside, t_exit, np.inf))
        hit = hit_outside | hit_inside
        # normal: axis attaining the selected slab bound
        axis_enter = np.argmax(t1, axis=-1)
        axis_exit = np.argmin(t2, axis=-1)
        axis = np.where(hit_outside, axis_enter, axis_exit)
        point = origin + t[..., None] * dirs
        offset = point - c
        sign = np.sign(np.take_along_axis(offset, axis[..., None], axis=-1)[..., 0])
        normal = np.zeros_like(dirs)
        np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
        return t, hit, normal


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]
    seed: int = 0
    frame: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        oc = origin - np.asarray(self.center)
        b = np.sum(dirs * oc, axis=-1)
        c = float(oc @ oc) - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > _EPS, t_near, t_far)
        hit = ok & (t > _EPS)
        t = np.where(hit, t, np.inf)
        point = origin + t[..., None] * dirs
        normal = (point - np.asarray(self.center)) / self.radius
        return t, hit, normal


@dataclass(frozen=True)
class OracleScene:
    primitives: tuple
    background: tuple[float, float, float] = (0.06, 0.08, 0.12)
    light_dir: tuple[float, float, float] = (0.35, 0.8, -0.1)
    ambient: float = 0.4
    texture_scale: float = 0.6
    texture_amplitude: float = 0.45

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        light = np.asarray(self.light_dir, dtype=np.float64)
        object.__setattr__(self, "light_dir", tuple(light / np.linalg.norm(light)))

    def transformed(self, rotation: np.ndarray | None = None,
                    translation=(0.0, 0.0, 0.0)) -> "OracleScene":
        """Rigidly move the whole scene. Rotations are restricted to signed
        permutations so boxes stay axis-aligned; textures ride along via `frame`."""
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        if not _is_signed_permutation(r):
            raise ValueError("scene rotation must be a signed permutation (axis-aligned)")
        t = np.asarray(translation, dtype=np.float64)
        prims = []
        for prim in self.primitives:
            new_center = tuple(r @ np.asarray(prim.center) + t)
            # rows of `frame` are the texture axes in world space; rotating the
            # primitive maps axis a -> R a, i.e. F' = F R^T
            new_frame = tuple(map(tuple, np.asarray(prim.frame) @ r.T))
            if isinstance(prim, Box):
                new_half = tuple(np.abs(r) @ np.asarray(prim.half))
                prims.append(replace(prim, center=new_center, half=new_half, frame=new_frame))
            else:
                prims.append(replace(prim, center=new_center, frame=new_frame))
        return replace(self, primitives=tuple(prims),
                       light_dir=tuple(r @ np.asarray(self.light_dir)))

    def trace(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest hit over all primitives: (t, prim_index, normal); misses have
        t = inf and prim_index = -1."""
        shape = dirs.shape[:-1]
        best_t = np.full(shape, np.inf)
        best_idx = np.full(shape, -1, dtype=np.int64)
        best_n = np.zeros(dirs.shape)
        for idx, prim in enumerate(self.primitives):
            t, hit, normal = prim.intersect(origin, dirs)
            closer = hit & (t < best_t)
            best_t = np.where(closer, t, best_t)
            best_idx = np.where(closer, idx, best_idx)
            best_n = np.where(closer[..., None], normal, best_n)
        return best_t, best_idx, best_n

    def shade(self, points: np.ndarray, normals: np.ndarray, prim_idx: np.ndarray,
              view_dirs: np.ndarray) -> np.ndarray:
        """Lambertian color at hit points (textured albedo, two-sided normals)."""
        shape = prim_idx.shape
        albedo = np.zeros(shape + (3,))
        for idx, prim in enumerate(self.primitives):
            sel = prim_idx == idx
            if not np.any(sel):
                continue
            frame = np.asarray(prim.frame)
            local = (points[sel] - np.asarray(prim.center)) @ frame.T
            base = np.asarray(prim.color)
            tex = np.stack([value_noise(local / self.texture_scale, prim.seed * 4 + c)
                            for c in range(3)], axis=-1)
            albedo[sel] = base * (1.0 - self.texture_amplitude + self.texture_amplitude * tex)
        facing = np.where(np.sum(normals * view_dirs, axis=-1, keepdims=True) > 0,
                          -normals, normals)
        lambert = np.maximum(0.0, -facing @ np.asarray(self.light_dir))
        shade = self.ambient + (1.0 - self.ambient) * lambert
        return np.clip(albedo * shade[..., None], 0.0, 1.0)


def render_oracle(scene: OracleScene, pose: Pose, camera: Intrinsics):
    """Exact render of the scene: returns a Keyframe (image, z-depth, pose, hit mask)."""
    from .dibr import Keyframe  # local import: dibr depends on this module's types

    u, v = np.meshgrid(np.arange(camera.width, dtype=np.float64),
                       np.arange(camera.height, dtype=np.float64))
    x = (u - camera.cx) / camera.fx
    y = (v - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    inv_norm = 1.0 / np.linalg.norm(d_cam, axis=-1)
    dirs = (d_cam * inv_norm[..., None]) @ pose.rotation.T
    origin = pose.center

    t, prim_idx, normals = scene.trace(origin, dirs)
    hit = prim_idx >= 0
    points = origin + np.where(hit, t, 0.0)[..., None] * dirs
    image = np.broadcast_to(np.asarray(scene.background), dirs.shape).copy()
    if np.any(hit):
        image[hit] = scene.shade(points, normals, prim_idx, dirs)[hit]
    depth = np.where(hit, t * inv_norm, np.inf)  # z-depth = t / |(x, y, 1)|
    return Keyframe(image=image, depth=depth, pose=pose, valid_mask=hit)


def oracle_flow(scene: OracleScene, pose_a: Pose, pose_b: Pose,
                camera: Intrinsics, rel_depth_tol: float = 1e-4):
    """Analytic flow a→b on a's pixel grid plus an occlusion/invalid mask.

    flow[v, u] = pixel_b - pixel_a for the surface point seen at (u, v) in a.
    The mask is True where the flow is unusable: no hit in a, the point falls
    behind b's camera or outside b's image, or b sees a nearer surface there
    (depth mismatch beyond rel_depth_tol).
    """
    from .interp import bilinear_sample

    kf_a = render_oracle(scene, pose_a, camera)
    h, w = camera.height, camera.width
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    flow = np.full((h, w, 2), np.nan)
    occluded = np.ones((h, w), dtype=bool)

    hit = kf_a.valid_mask
    x = (u - camera.cx) / camera.fx * kf_a.depth
    y = (v - camera.cy) / camera.fy * kf_a.depth
    pts_cam_a = np.stack([x, y, kf_a.depth], axis=-1)
    pts_world = pose_a.to_world(np.where(hit[..., None], pts_cam_a, 1.0))
    pts_cam_b = pose_b.to_camera(pts_world)
    z_b = pts_cam_b[..., 2]
    front = hit & (z_b > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u_b = camera.fx * pts_cam_b[..., 0] / z_b + camera.cx
        v_b = camera.fy * pts_cam_b[..., 1] / z_b + camera.cy
    flow[front] = np.stack([u_b - u, v_b - v], axis=-1)[front]

    depth_b = render_oracle(scene, pose_b, camera).depth
    # background gets a huge finite depth so exact-integer samples next to it
    # stay exact while blended edge samples fail the tolerance (conservative)
    sampled, support = bilinear_sample(np.where(np.isfinite(depth_b), depth_b, 1e30),
                                       np.stack([u_b, v_b], axis=-1))
    with np.errstate(invalid="ignore"):
        visible = front & support & (np.abs(sampled - z_b) <= rel_depth_tol * z_b)
    occluded = ~visible
    return flow, occluded


# -- scene files --------------------------------------------------------------

def load_scene(path: str | Path) -> OracleScene:
    """Read a scene from the flat key=value dialect (box.N.* / sphere.N.* groups)."""
    kv = io.read_kv_file(path)
    seed = int(kv.get("seed", "0"))
    groups: dict[tuple[str, int], dict[str, str]] = {}
    for key, raw in kv.items():
        parts = key.split(".")
        if len(parts) == 3 and parts[0] in ("box", "sphere"):
            groups.setdefault((parts[0], int(parts[1])), {})[parts[2]] = raw
    prims = []
    for (kind, index) in sorted(groups):
        fields = groups[(kind, index)]
        color = io.kv_floats(fields["color"])
        prim_seed = int(fields.get("seed", seed * 1000 + index))
        if kind == "box":
            prims.append(Box(center=io.kv_floats(fields["center"]),
                             half=io.kv_floats(fields["half"]),
                             color=color, seed=prim_seed))
        else:
            prims.append(Sphere(center=io.kv_floats(fields["center"]),
                                radius=float(fields["radius"]),
                                color=color, seed=prim_seed))
    if not prims:
        raise ValueError(f"scene file {path} defines no primitives")
    return OracleScene(
        primitives=tuple(prims),
        background=io.kv_floats(kv.get("background", "0.06 0.08 0.12")),
        light_dir=io.kv_floats(kv.get("light_dir", "0.35 0.8 -0.1")),
        ambient=float(kv.get("ambient", "0.4")),
        texture_scale=float(kv.get("texture_scale", "0.6")),
        texture_amplitude=float(kv.get("texture_amplitude", "0.45")),
    )


def bundled_scene_path(name: str = "courtyard") -> Path:
    path = Path(__file__).parent / "scenes" / f"{name}.cfg"
    if not path.exists():
        raise FileNotFoundError(f"no bundled scene named {name!r}")
    return path


def bundled_trajectory_path(name: str) -> Path:
    path = Path(__file__).parent / "scenes" / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(f"no bundled trajectory named {name!r}")
    return path
