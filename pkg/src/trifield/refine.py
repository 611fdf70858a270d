"""View refinement boundary: a rendered coarse view (image, feature map, depth,
alpha) goes in, a rectified image comes out. The interface keeps the slots a
learned generative refiner would need (prompt, per-pixel feature conditioning);
the bundled implementations are deterministic desk-scale baselines.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, Pose


class RefinerError(RuntimeError):
    pass


@dataclass(frozen=True)
class RefineInput:
    image: np.ndarray     # (H, W, 3) rendered color
    feature: np.ndarray   # (H, W, F) rendered feature map
    depth: np.ndarray     # (H, W) rendered depth
    alpha: np.ndarray     # (H, W) accumulated alpha in [0, 1]
    pose: Pose
    prompt: str = ""

    def __post_init__(self):
        shape = self.image.shape[:2]
        if (self.feature.shape[:2] != shape or self.depth.shape != shape
                or self.alpha.shape != shape):
            raise ValueError("refine input resolutions disagree")
        if self.alpha.min() < -1e-9 or self.alpha.max() > 1 + 1e-9:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class RefineOutput:
    image: np.ndarray
    depth: np.ndarray | None
    confidence: np.ndarray

    def __post_init__(self):
        if self.image.min() < -1e-12 or self.image.max() > 1 + 1e-12:
            raise ValueError("refined image must lie in [0, 1]")
        if self.confidence.dtype != np.dtype(bool):
            raise ValueError("confidence mask must be boolean")


class Refiner(ABC):
    name = "abstract"

    @abstractmethod
    def refine(self, request: RefineInput) -> RefineOutput:
        ...


class IdentityRefiner(Refiner):
    """Passes the rendered image through untouched (no depth opinion)."""

    name = "identity"

    def refine(self, request):
        return RefineOutput(image=request.image.copy(), depth=None,
                            confidence=np.ones(request.image.shape[:2], dtype=bool))


class OracleRefiner(Refiner):
    """Replaces the render with the synthetic oracle's exact view (and depth)."""

    name = "oracle"

    def __init__(self, scene, camera: Intrinsics):
        self.scene = scene
        self.camera = camera

    def refine(self, request):
        from .synth import render_oracle

        kf = render_oracle(self.scene, request.pose, self.camera)
        return RefineOutput(image=kf.image, depth=kf.depth,
                            confidence=np.ones(kf.image.shape[:2], dtype=bool))


class LowAlphaFillRefiner(Refiner):
    """Replaces low-alpha pixels with the color of the nearest high-alpha pixel;
    pixels at or above the threshold pass through untouched."""

    name = "lowalpha"

    def __init__(self, tau: float = 0.5):
        self.tau = float(tau)

    def refine(self, request):
        low = request.alpha < self.tau
        confidence = ~low
        if not np.any(confidence):
            return RefineOutput(image=request.image.copy(), depth=None,
                                confidence=confidence)
        image = request.image.copy()
        if np.any(low):
            _, (iy, ix) = ndimage.distance_transform_edt(low, return_indices=True)
            image[low] = request.image[iy, ix][low]
        return RefineOutput(image=image, depth=None, confidence=confidence)


def make_refiner(name: str, scene=None, camera: Intrinsics | None = None,
                 tau: float = 0.5) -> Refiner:
    if name == "identity":
        return IdentityRefiner()
    if name == "oracle":
        if scene is None or camera is None:
            raise ValueError("oracle refiner needs a synthetic scene and camera")
        return OracleRefiner(scene, camera)
    if name == "lowalpha":
        return LowAlphaFillRefiner(tau)
    raise ValueError(f"unknown refiner {name!r}")


# -- adapter resolution contract ----------------------------------------------

def pixel_unshuffle(arr: np.ndarray, factor: int = 8) -> np.ndarray:
    """Space-to-depth: (H, W, C) -> (H/f, W/f, f*f*C); exact inverse exists."""
    h, w, c = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by {factor}")
    out = arr.reshape(h // factor, factor, w // factor, factor, c)
    return out.transpose(0, 2, 1, 3, 4).reshape(h // factor, w // factor,
                                                factor * factor * c)


def pixel_shuffle(arr: np.ndarray, factor: int = 8) -> np.ndarray:
    h, w, fc = arr.shape
    if fc % (factor * factor):
        raise ValueError("channel count is not a multiple of factor^2")
    c = fc // (factor * factor)
    out = arr.reshape(h, w, factor, factor, c).transpose(0, 2, 1, 3, 4)
    return out.reshape(h * factor, w * factor, c)


def _avg_pool2(arr: np.ndarray) -> np.ndarray:
    """2x average pooling (stride 2); trailing odd rows/cols are dropped and
    size-1 axes pass through."""
    h, w, c = arr.shape
    if h > 1:
        arr = arr[: h - h % 2].reshape(h // 2, 2, arr.shape[1], c).mean(axis=1)
    if w > 1:
        arr = arr[:, : w - w % 2].reshape(arr.shape[0], w // 2, 2, c).mean(axis=2)
    return arr


def adapter_downscale(arr: np.ndarray) -> list[np.ndarray]:
    """Four-scale pyramid: pixel-unshuffle by 8, then three 2x average pools.

    Mirrors the refinement adapter's resolution contract (512 -> 64 at the
    first stage); the first stage is lossless.
    """
    stages = [pixel_unshuffle(np.asarray(arr, dtype=np.float64), 8)]
    for _ in range(3):
        stages.append(_avg_pool2(stages[-1]))
    return stages
