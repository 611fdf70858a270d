"""Unified scene representation: L-infinity scene contraction, tri-plane feature
grids with bilinear lookup, positional encoding, the implicit radiance-field
decoder, and feature-volume back-projection / axis aggregation for plane
initialization.

A field block owns three (S, S, D) planes plus decoder weights and covers an
axis-aligned cube `bounds`; points are mapped bounds -> [-1, 1]^3, contracted
into (-2, 2)^3, then looked up bilinearly. Everything is expressed in torch so
reverse-mode gradients flow from rendered pixels back into planes and weights.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

CONTRACT_RADIUS = 2.0
CHECKPOINT_MAGIC = b"TPF1"


class CheckpointError(RuntimeError):
    pass


def contract(points: torch.Tensor) -> torch.Tensor:
    """Map unbounded points into the open L-infinity ball of radius 2.

    Identity inside the unit ball; outside, (2 - 1/n) * x / n with n = |x|_inf.
    """
    n = points.abs().amax(dim=-1, keepdim=True)
    safe = torch.clamp(n, min=1.0)
    warped = (2.0 - 1.0 / safe) * (points / safe)
    return torch.where(n <= 1.0, points, warped)


def inverse_contract(contracted: torch.Tensor, max_norm: float = 2.0 - 1e-2) -> torch.Tensor:
    """Inverse of `contract`; inputs are clamped to |c|_inf <= max_norm since the
    boundary maps to infinity."""
    n = contracted.abs().amax(dim=-1, keepdim=True)
    scale = torch.clamp(n, max=max_norm) / torch.clamp(n, min=1e-12)
    c = contracted * scale
    n = torch.clamp(n, max=max_norm)
    outside = c / torch.clamp(n * (2.0 - n), min=1e-12)
    return torch.where(n <= 1.0, c, outside)


def positional_encoding(v: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v)].

    Output width is n * (2L + 1); L = 0 returns v unchanged.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be nonnegative")
    if num_freqs == 0:
        return v
    scales = (2.0 ** torch.arange(num_freqs, dtype=v.dtype)) * torch.pi
    scaled = v.unsqueeze(-2) * scales.unsqueeze(-1)                 # (..., L, n)
    enc = torch.stack((scaled.sin(), scaled.cos()), dim=-2)         # (..., L, 2, n)
    return torch.cat([v, enc.reshape(*v.shape[:-1], -1)], dim=-1)


def encoding_width(n: int, num_freqs: int) -> int:
    return n * (2 * num_freqs + 1)


# -- decoder ------------------------------------------------------------------

_LEAKY_SLOPE = 0.01


@dataclass
class DecoderParams:
    """Trunk of `layers` linear layers (LeakyReLU), with the tri-plane feature
    concatenated into layer 1 and again, as a skip, into layer 3. Density and
    the geometric feature g come off the last layer; the color head consumes
    the encoded view direction together with the layer-4 trunk feature.
    Weights are stored (in_features, out_features)."""

    d: int
    hidden: int
    layers: int
    l_pos: int
    l_dir: int
    weights: list[torch.Tensor] = dataclass_field(default_factory=list)
    biases: list[torch.Tensor] = dataclass_field(default_factory=list)
    w_sigma: torch.Tensor | None = None
    b_sigma: torch.Tensor | None = None
    w_feat: torch.Tensor | None = None
    b_feat: torch.Tensor | None = None
    w_color1: torch.Tensor | None = None
    b_color1: torch.Tensor | None = None
    w_color2: torch.Tensor | None = None
    b_color2: torch.Tensor | None = None

    SKIP_LAYER = 2   # 0-based: the third layer sees the tri-plane feature again
    COLOR_TAP = 3    # 0-based: the color head taps the fourth layer's output

    @property
    def feature_dim(self) -> int:
        return 3 * self.d

    def trunk_in_features(self, layer: int) -> int:
        base = encoding_width(3, self.l_pos) + self.feature_dim if layer == 0 else self.hidden
        return base + (self.feature_dim if layer == self.SKIP_LAYER and layer > 0 else 0)

    @staticmethod
    def create(d: int, hidden: int, layers: int, l_pos: int = 10, l_dir: int = 4,
               generator: torch.Generator | None = None,
               dtype: torch.dtype = torch.float32,
               density_bias: float = -6.0) -> "DecoderParams":
        """Kaiming fan-in initialization, zero biases except the density bias,
        which starts strongly negative so fresh blocks render nearly empty."""
        if layers <= DecoderParams.COLOR_TAP:
            raise ValueError(f"need more than {DecoderParams.COLOR_TAP + 1} trunk layers")
        params = DecoderParams(d=d, hidden=hidden, layers=layers, l_pos=l_pos, l_dir=l_dir)

        def linear(n_in, n_out, bias_value=0.0):
            w = torch.randn(n_in, n_out, generator=generator, dtype=torch.float64)
            w *= (2.0 / n_in) ** 0.5
            b = torch.full((n_out,), bias_value, dtype=torch.float64)
            return w.to(dtype).requires_grad_(True), b.to(dtype).requires_grad_(True)

        for layer in range(layers):
            w, b = linear(params.trunk_in_features(layer), hidden)
            params.weights.append(w)
            params.biases.append(b)
        params.w_sigma, params.b_sigma = linear(hidden, 1, bias_value=density_bias)
        params.w_feat, params.b_feat = linear(hidden, hidden)
        params.w_color1, params.b_color1 = linear(encoding_width(3, l_dir) + hidden, hidden)
        params.w_color2, params.b_color2 = linear(hidden, 3)
        return params

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend([self.w_sigma, self.b_sigma, self.w_feat, self.b_feat,
                    self.w_color1, self.b_color1, self.w_color2, self.b_color2])
        return out


def decode(params: DecoderParams, m_p: torch.Tensor, x: torch.Tensor,
           d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Forward pass: (sigma (B,), g (B, hidden), color (B, 3) in [0, 1])."""
    if m_p.shape[-1] != params.feature_dim:
        raise ValueError(f"expected tri-plane feature width {params.feature_dim}, "
                         f"got {m_p.shape[-1]}")
    h = torch.cat([positional_encoding(x, params.l_pos), m_p], dim=-1)
    tap = None
    for layer in range(params.layers):
        if layer == params.SKIP_LAYER:
            h = torch.cat([h, m_p], dim=-1)
        h = torch.nn.functional.leaky_relu(
            h @ params.weights[layer] + params.biases[layer], _LEAKY_SLOPE)
        if layer == params.COLOR_TAP:
            tap = h
    sigma = torch.nn.functional.softplus(h @ params.w_sigma + params.b_sigma)[..., 0]
    g = h @ params.w_feat + params.b_feat
    ch = torch.cat([positional_encoding(d, params.l_dir), tap], dim=-1)
    ch = torch.nn.functional.leaky_relu(ch @ params.w_color1 + params.b_color1, _LEAKY_SLOPE)
    color = torch.sigmoid(ch @ params.w_color2 + params.b_color2)
    return sigma, g, color


# -- tri-plane field ----------------------------------------------------------

@dataclass(frozen=True)
class Bounds:
    """Axis-aligned cube: center plus per-axis half extent (equal for cubes)."""

    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extent, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extent", h)

    @staticmethod
    def cube(center, half_extent: float) -> "Bounds":
        return Bounds(np.asarray(center, dtype=np.float64),
                      np.full(3, float(half_extent)))

    def contains(self, point) -> bool:
        rel = np.abs(np.asarray(point, dtype=np.float64) - self.center)
        return bool(np.all(rel <= self.half_extent))


@dataclass
class TriPlaneField:
    """Three (S, S, D) planes indexed (xy), (yz), (xz) plus decoder weights."""

    planes: list[torch.Tensor]
    decoder: DecoderParams
    bounds: Bounds

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[0]

    @property
    def d(self) -> int:
        return self.planes[0].shape[2]

    @property
    def dtype(self) -> torch.dtype:
        return self.planes[0].dtype

    @staticmethod
    def create(resolution: int, d: int, hidden: int, layers: int, bounds: Bounds,
               generator: torch.Generator | None = None,
               dtype: torch.dtype = torch.float32, l_pos: int = 10, l_dir: int = 4,
               plane_init: float = 1e-2, density_bias: float = -6.0) -> "TriPlaneField":
        planes = []
        for _ in range(3):
            p = (torch.rand(resolution, resolution, d, generator=generator,
                            dtype=torch.float64) * 2.0 - 1.0) * plane_init
            planes.append(p.to(dtype).requires_grad_(True))
        decoder = DecoderParams.create(d=d, hidden=hidden, layers=layers, l_pos=l_pos,
                                       l_dir=l_dir, generator=generator, dtype=dtype,
                                       density_bias=density_bias)
        return TriPlaneField(planes=planes, decoder=decoder, bounds=bounds)

    def parameters(self) -> list[torch.Tensor]:
        return list(self.planes) + self.decoder.parameters()

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        """World points -> bounds-relative coordinates ([-1, 1]^3 inside the cube)."""
        center = torch.tensor(self.bounds.center, dtype=points.dtype)
        half = torch.tensor(self.bounds.half_extent, dtype=points.dtype)
        return (points - center) / half


def grid_coords(contracted: torch.Tensor, resolution: int) -> torch.Tensor:
    """Contracted coordinates (-2, 2) -> continuous grid coordinates [0, S-1]."""
    return (contracted + CONTRACT_RADIUS) * (resolution - 1) / (2 * CONTRACT_RADIUS)


def sample_triplane(field_or_planes, points: torch.Tensor,
                    contracted: torch.Tensor | None = None) -> torch.Tensor:
    """Concatenated per-plane bilinear features [xy(i,j), yz(j,k), xz(i,k)].

    `points` are world coordinates when a TriPlaneField is given (they are
    normalized and contracted here); pass `contracted` to reuse precomputed
    contracted coordinates. All corner gathers run as one fused index lookup.
    """
    if isinstance(field_or_planes, TriPlaneField):
        planes = field_or_planes.planes
        if contracted is None:
            contracted = contract(field_or_planes.normalize(points))
    else:
        planes = field_or_planes
        if contracted is None:
            contracted = contract(points)
    s = planes[0].shape[0]
    d = planes[0].shape[2]
    lead = contracted.shape[:-1]
    g = torch.clamp(grid_coords(contracted.reshape(-1, 3), s), 0.0, s - 1.0)
    g0 = torch.clamp(g.floor().long(), max=s - 2)
    f = g - g0
    batch = g.shape[0]
    g0x, g0y, g0z = g0.unbind(-1)
    fx, fy, fz = f.unbind(-1)
    # per-plane 2D coordinates: xy -> (x, y), yz -> (y, z), xz -> (x, z)
    a0 = torch.cat([g0x, g0y, g0x])
    b0 = torch.cat([g0y, g0z, g0z])
    fa = torch.cat([fx, fy, fx]).unsqueeze(-1)
    fb = torch.cat([fy, fz, fz]).unsqueeze(-1)
    offsets = torch.repeat_interleave(torch.arange(3) * (s * s), batch)
    base = offsets + a0 * s + b0
    idx = torch.cat([base, base + s, base + 1, base + s + 1])
    flat = torch.stack(list(planes)).reshape(3 * s * s, d)
    c00, c10, c01, c11 = flat.index_select(0, idx).reshape(4, 3 * batch, d).unbind(0)
    out = ((1 - fa) * (1 - fb) * c00 + fa * (1 - fb) * c10
           + (1 - fa) * fb * c01 + fa * fb * c11)
    return out.reshape(3, batch, d).permute(1, 0, 2).reshape(*lead, 3 * d)


def field_query(field: TriPlaneField, points: torch.Tensor,
                dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Contract, sample the planes and decode in one go.

    The positional input to the decoder is the contracted coordinate scaled to
    (-1, 1); gradients do not flow into the points themselves.
    """
    contracted = contract(field.normalize(points))
    m_p = sample_triplane(field, points, contracted=contracted)
    return decode(field.decoder, m_p, contracted / CONTRACT_RADIUS, dirs)


# -- feature volume and axis aggregation --------------------------------------

@dataclass
class FeatureVolume:
    grid: torch.Tensor  # (S, S, S, D)
    bounds: Bounds


def volume_voxel_centers(resolution: int, bounds: Bounds,
                         max_norm: float = 2.0 - 1e-2) -> np.ndarray:
    """World positions of the (S, S, S) grid nodes, via inverse contraction.

    Boundary nodes sit at the contraction's rim; they are pulled in to
    max_norm so their world position is finite.
    """
    g = np.arange(resolution, dtype=np.float64)
    c = g * (2 * CONTRACT_RADIUS) / (resolution - 1) - CONTRACT_RADIUS
    cx, cy, cz = np.meshgrid(c, c, c, indexing="ij")
    contracted = torch.from_numpy(np.stack([cx, cy, cz], axis=-1))
    world = inverse_contract(contracted, max_norm=max_norm).numpy()
    return world * bounds.half_extent + bounds.center


def backproject_features(keyframes: list, feature_maps: list[np.ndarray],
                         camera, resolution: int, bounds: Bounds,
                         dtype: torch.dtype = torch.float32) -> FeatureVolume:
    """Average per-view feature samples into an (S, S, S, D) volume.

    Every voxel center is projected into every keyframe; samples with positive
    depth that land inside the feature map (aligned to the image by uniform
    scaling) contribute a bilinear sample. Unseen voxels stay zero.
    """
    from .interp import bilinear_sample

    if not keyframes:
        raise ValueError("need at least one keyframe")
    if len(feature_maps) != len(keyframes):
        raise ValueError("one feature map per keyframe required")
    d = feature_maps[0].shape[2]
    centers = volume_voxel_centers(resolution, bounds).reshape(-1, 3)
    total = np.zeros((centers.shape[0], d))
    count = np.zeros(centers.shape[0])
    for kf, fmap in zip(keyframes, feature_maps):
        fmap = np.asarray(fmap, dtype=np.float64)
        cam_pts = kf.pose.to_camera(centers)
        z = cam_pts[:, 2]
        front = z > 0
        if not np.any(front):
            continue
        u = camera.fx * cam_pts[front, 0] / z[front] + camera.cx
        v = camera.fy * cam_pts[front, 1] / z[front] + camera.cy
        su = fmap.shape[1] / camera.width
        sv = fmap.shape[0] / camera.height
        values, support = bilinear_sample(fmap, np.stack([u * su, v * sv], axis=-1))
        idx = np.nonzero(front)[0][support]
        total[idx] += values[support]
        count[idx] += 1.0
    seen = count > 0
    total[seen] /= count[seen, None]
    grid = torch.from_numpy(total.reshape(resolution, resolution, resolution, d)).to(dtype)
    return FeatureVolume(grid=grid, bounds=bounds)


@dataclass
class AxisMlp:
    """Two-layer scorer producing one logit per slice along the pooled axis;
    input is the voxel feature concatenated with the axis-pooled average."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor

    @staticmethod
    def create(d: int, hidden: int = 32, generator: torch.Generator | None = None,
               dtype: torch.dtype = torch.float32) -> "AxisMlp":
        w1 = torch.randn(2 * d, hidden, generator=generator, dtype=torch.float64)
        w1 *= (2.0 / (2 * d)) ** 0.5
        w2 = torch.randn(hidden, 1, generator=generator, dtype=torch.float64)
        w2 *= (2.0 / hidden) ** 0.5
        return AxisMlp(w1.to(dtype), torch.zeros(hidden, dtype=dtype),
                       w2.to(dtype), torch.zeros(1, dtype=dtype))

    def logits(self, volume: torch.Tensor, axis: int) -> torch.Tensor:
        pooled = volume.mean(dim=axis, keepdim=True).expand_as(volume)
        h = torch.cat([volume, pooled], dim=-1)
        h = torch.nn.functional.leaky_relu(h @ self.w1 + self.b1, _LEAKY_SLOPE)
        return (h @ self.w2 + self.b2)[..., 0]


def weighted_plane(volume: torch.Tensor, logits: torch.Tensor, axis: int) -> torch.Tensor:
    """Softmax the logits along `axis` and reduce the volume with those weights."""
    weights = torch.softmax(logits, dim=axis)
    return (weights.unsqueeze(-1) * volume).sum(dim=axis)


def aggregate_volume(volume: FeatureVolume,
                     axis_mlps: tuple[AxisMlp, AxisMlp, AxisMlp]):
    """Collapse the volume into (plane_xy, plane_yz, plane_xz).

    xy pools/weights over z (axis 2), yz over x (axis 0), xz over y (axis 1),
    so indexing matches the sampler's [xy(i,j), yz(j,k), xz(i,k)] convention.
    """
    v = volume.grid
    plane_xy = weighted_plane(v, axis_mlps[0].logits(v, 2), 2)
    plane_yz = weighted_plane(v, axis_mlps[1].logits(v, 0), 0)
    plane_xz = weighted_plane(v, axis_mlps[2].logits(v, 1), 1)
    return plane_xy, plane_yz, plane_xz


def make_pixel_features(keyframe, d: int, num_freqs: int = 4) -> np.ndarray:
    """Hand-crafted per-pixel features: RGB plus a 2D positional encoding of the
    normalized pixel coordinates, padded or truncated to width d."""
    h, w = keyframe.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    coords = np.stack([2 * u / max(w - 1, 1) - 1, 2 * v / max(h - 1, 1) - 1], axis=-1)
    parts = [keyframe.image, coords]
    for level in range(num_freqs):
        arg = (2.0**level) * np.pi * coords
        parts.extend([np.sin(arg), np.cos(arg)])
    feats = np.concatenate(parts, axis=-1)
    if feats.shape[-1] >= d:
        return feats[..., :d]
    pad = np.zeros((h, w, d - feats.shape[-1]))
    return np.concatenate([feats, pad], axis=-1)


# -- checkpoints --------------------------------------------------------------

def save_field(path: str | Path, field: TriPlaneField) -> None:
    """Binary checkpoint: magic, u32 dims (S, D, hidden, layers), all tensors as
    little-endian f32 in declaration order, bounds as 6 f64."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<4I", field.resolution, field.d,
                            field.decoder.hidden, field.decoder.layers))
        for tensor in field.parameters():
            f.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())
        f.write(np.concatenate([field.bounds.center,
                                field.bounds.half_extent]).astype("<f8").tobytes())


def load_field(path: str | Path, l_pos: int = 10, l_dir: int = 4,
               dtype: torch.dtype = torch.float32) -> TriPlaneField:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    try:
        s, d, hidden, layers = struct.unpack("<4I", data[4:20])
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header in {path}") from exc
    template = TriPlaneField.create(resolution=s, d=d, hidden=hidden, layers=layers,
                                    bounds=Bounds.cube((0, 0, 0), 1.0),
                                    l_pos=l_pos, l_dir=l_dir, dtype=dtype)
    offset = 20
    params = template.parameters()
    expected = sum(p.numel() for p in params) * 4 + 48
    if len(data) - offset != expected:
        raise CheckpointError(f"checkpoint size mismatch in {path}: "
                              f"expected {expected + offset} bytes, got {len(data)}")
    with torch.no_grad():
        for p in params:
            n = p.numel() * 4
            arr = np.frombuffer(data[offset:offset + n], dtype="<f4").reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(arr.copy()).to(dtype))
            offset += n
    raw = np.frombuffer(data[offset:offset + 48], dtype="<f8")
    template.bounds = Bounds(raw[:3].copy(), raw[3:].copy())
    return template
