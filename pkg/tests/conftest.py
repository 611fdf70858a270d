import numpy as np
import pytest
import torch

from trifield.camera import Intrinsics, Pose
from trifield.synth import Box, OracleScene, Sphere


@pytest.fixture(scope="session")
def camera64():
    return Intrinsics.from_fov(64, 64, 60.0)


@pytest.fixture(scope="session")
def small_scene():
    """Compact textured scene used by geometry tests (fast to trace)."""
    return OracleScene(primitives=(
        Box(center=(0.0, 1.6, 4.0), half=(6.0, 0.2, 6.0), color=(0.5, 0.45, 0.4), seed=11),
        Box(center=(-1.0, 0.9, 3.0), half=(0.5, 0.5, 0.5), color=(0.8, 0.3, 0.3), seed=12),
        Box(center=(1.2, 1.0, 4.0), half=(0.5, 0.4, 0.5), color=(0.3, 0.4, 0.85), seed=13),
        Sphere(center=(0.2, 1.0, 2.6), radius=0.45, color=(0.3, 0.8, 0.75), seed=14),
    ))


@pytest.fixture(scope="session")
def flat_scene():
    """Texture-free fronto-parallel wall: exact color equality under warping."""
    return OracleScene(primitives=(
        Box(center=(0.0, 0.0, 6.0), half=(30.0, 30.0, 0.5), color=(0.6, 0.5, 0.4), seed=0),
    ), texture_amplitude=0.0, ambient=1.0)


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@pytest.fixture
def random_pose():
    def make(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
        axis = rng.normal(size=3)
        angle = rng.uniform(-np.pi, np.pi)
        return Pose(rotation_about(axis, angle),
                    rng.normal(scale=translation_scale, size=3))
    return make


@pytest.fixture(autouse=True)
def _single_threaded_determinism():
    torch.set_num_threads(2)
    yield
