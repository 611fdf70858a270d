"""Run configuration (flat key=value file) and deterministic seed derivation.

Every run resolves a RunConfig and writes an exact copy next to its outputs;
replaying the same config and seed reproduces outputs bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import io


def mix_seed(base: int, *tags: int | str) -> int:
    """Stable 63-bit seed derived from a base seed and a tag path."""
    z = np.uint64(base & 0xFFFFFFFFFFFFFFFF)
    for tag in tags:
        if isinstance(tag, str):
            h = np.uint64(1469598103934665603)
            for ch in tag.encode():
                h = np.uint64((int(h) ^ ch) * 1099511628211 & 0xFFFFFFFFFFFFFFFF)
            t = h
        else:
            t = np.uint64(tag & 0xFFFFFFFFFFFFFFFF)
        z = np.uint64((int(z) * 6364136223846793005 + int(t) + 1442695040888963407)
                      & 0xFFFFFFFFFFFFFFFF)
        z = z ^ (z >> np.uint64(29))
    return int(z & np.uint64(0x7FFFFFFFFFFFFFFF))


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0                # 0 = leave the torch default untouched
    dtype: str = "float32"

    # inputs: either a scene spec, or an image + depth pair on disk
    scene: str = ""
    image: str = ""
    depth: str = ""

    # camera
    image_size: int = 128
    fov_deg: float = 60.0

    # representation
    plane_resolution: int = 32
    feature_dim: int = 16
    hidden: int = 64
    layers: int = 8
    l_pos: int = 10
    l_dir: int = 4
    plane_init: float = 1e-2
    density_bias: float = -6.0

    # rendering
    n_samples: int = 64
    t_near: float = 0.3
    t_far: float = 18.0
    background: str = "scene"       # "scene" or "r g b"
    chunk_size: int = 1024

    # supporting database
    neighbor_count: int = 8
    neighbor_radius: float = 0.25
    neighbor_theta_deg: float = 90.0
    look_at_distance: float = 0.0   # 0 = 2x mean depth of the initial view
    hole_filler: str = "auto"       # auto | oracle | nearest | constant
    footprint_radius: int = 1

    # optimization
    batch_size: int = 256
    incremental_batch: int = 128
    init_iters: int = 5000
    incremental_iters: int = 800
    incremental_warmup: int = 80
    lambda_start: float = 0.1
    lambda_end: float = 0.01
    lr_peak: float = 5e-4
    lr_final: float = 5e-6
    warmup: int = 500
    clip: float = 1.0

    # scene growth
    block_half_extent: float = 2.0
    window: int = 5

    # refinement
    refiner: str = "identity"
    lowalpha_tau: float = 0.5

    def torch_dtype(self) -> torch.dtype:
        if self.dtype == "float32":
            return torch.float32
        if self.dtype == "float64":
            return torch.float64
        raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_kv(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "RunConfig":
        known = {f.name: f.type for f in fields(RunConfig)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(RunConfig):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return RunConfig(**kwargs)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_kv(io.read_kv_file(path))

    def save(self, path: str | Path) -> None:
        io.write_kv_file(path, self.to_kv())
