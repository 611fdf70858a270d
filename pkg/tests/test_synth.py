import numpy as np
import pytest

from trifield.camera import Intrinsics, Pose
from trifield.synth import (Box, OracleScene, Sphere, bundled_scene_path, load_scene,
                            oracle_flow, render_oracle, value_noise)

from conftest import rotation_about


def test_camera_inside_enclosing_box_all_valid(camera64):
    scene = OracleScene(primitives=(
        Box(center=(0.0, 0.0, 0.0), half=(5.0, 5.0, 5.0), color=(0.7, 0.7, 0.7)),))
    kf = render_oracle(scene, Pose.identity(), camera64)
    assert kf.valid_mask.all()
    assert np.isfinite(kf.depth).all()


def test_sphere_depth_minimal_at_center_and_symmetric(camera64):
    scene = OracleScene(primitives=(
        Sphere(center=(0.0, 0.0, 4.0), radius=1.0, color=(0.9, 0.2, 0.2)),))
    kf = render_oracle(scene, Pose.identity(), camera64)
    h, w = kf.depth.shape
    center = kf.depth[h // 2, w // 2]
    assert center == pytest.approx(3.0, abs=1e-3)
    assert center <= kf.depth[kf.valid_mask].min() + 1e-12
    assert np.allclose(kf.depth, kf.depth[:, ::-1], equal_nan=True, atol=1e-9)


def test_frontoparallel_plane_constant_depth(camera64):
    scene = OracleScene(primitives=(
        Box(center=(0.0, 0.0, 7.5), half=(50.0, 50.0, 0.5), color=(0.5, 0.5, 0.5)),))
    kf = render_oracle(scene, Pose.identity(), camera64)
    assert kf.valid_mask.all()
    assert np.allclose(kf.depth, 7.0, atol=1e-12)


def test_render_deterministic(small_scene, camera64):
    a = render_oracle(small_scene, Pose.identity(), camera64)
    b = render_oracle(small_scene, Pose.identity(), camera64)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.depth, b.depth)


def test_translation_equivariance(small_scene, camera64):
    offset = np.array([0.7, -0.4, 1.3])
    pose = Pose(np.eye(3), offset)
    moved = small_scene.transformed(translation=offset)
    ref = render_oracle(small_scene, Pose.identity(), camera64)
    got = render_oracle(moved, pose, camera64)
    assert np.allclose(got.depth[ref.valid_mask], ref.depth[ref.valid_mask], atol=1e-12)
    assert np.allclose(got.image, ref.image, atol=1e-12)


def test_axis_rotation_equivariance(small_scene, camera64):
    rot = rotation_about([0.0, 1.0, 0.0], np.pi / 2)
    rot = np.rint(rot)  # exact signed permutation
    moved = small_scene.transformed(rotation=rot, translation=(0.5, 0.0, -2.0))
    pose = Pose(rot, np.array([0.5, 0.0, -2.0]))
    ref = render_oracle(small_scene, Pose.identity(), camera64)
    got = render_oracle(moved, pose, camera64)
    assert np.allclose(got.depth[ref.valid_mask], ref.depth[ref.valid_mask], atol=1e-12)
    assert np.allclose(got.image, ref.image, atol=1e-12)


def test_scene_rejects_general_rotation(small_scene):
    with pytest.raises(ValueError):
        small_scene.transformed(rotation=rotation_about([1.0, 1.0, 0.0], 0.3))


def test_flow_zero_for_same_pose(small_scene, camera64):
    flow, occluded = oracle_flow(small_scene, Pose.identity(), Pose.identity(), camera64)
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    assert np.allclose(flow[~occluded], 0.0, atol=1e-9)
    assert not occluded[kf.valid_mask].any()
    assert occluded[~kf.valid_mask].all()


def test_flow_plane_disparity_closed_form(camera64):
    scene = OracleScene(primitives=(
        Box(center=(0.0, 0.0, 5.5), half=(60.0, 60.0, 0.5), color=(0.5, 0.5, 0.5)),))
    tx = 0.3
    pose_b = Pose(np.eye(3), np.array([tx, 0.0, 0.0]))
    flow, occluded = oracle_flow(scene, Pose.identity(), pose_b, camera64)
    expected_u = -camera64.fx * tx / 5.0
    inner = ~occluded
    assert inner.sum() > 0
    assert np.allclose(flow[inner][:, 0], expected_u, atol=1e-9)
    assert np.allclose(flow[inner][:, 1], 0.0, atol=1e-9)


def test_value_noise_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=10.0, size=(500, 3))
    a = value_noise(pts, salt=42)
    b = value_noise(pts, salt=42)
    c = value_noise(pts, salt=43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() < 1.0


def test_value_noise_continuous_at_lattice():
    pts = np.array([[1.0, 2.0, 3.0]])
    eps = 1e-9
    below = value_noise(pts - eps, salt=1)
    above = value_noise(pts + eps, salt=1)
    assert np.allclose(below, above, atol=1e-6)


def test_bundled_scene_loads():
    scene = load_scene(bundled_scene_path())
    assert len(scene.primitives) == 9
    assert scene.ambient == pytest.approx(0.4)
    with pytest.raises(FileNotFoundError):
        bundled_scene_path("nope")


def test_scene_file_round_trip(tmp_path, small_scene):
    # the parser accepts arbitrary ordering and comments
    text = """
# my scene
seed = 3
background = 0.1 0.1 0.1
sphere.0.center = 0 0 4
sphere.0.radius = 1.0
sphere.0.color = 1 0 0
box.0.center = 0 2 4
box.0.half = 1 1 1
box.0.color = 0 1 0
"""
    path = tmp_path / "scene.cfg"
    path.write_text(text)
    scene = load_scene(path)
    assert len(scene.primitives) == 2
    assert isinstance(scene.primitives[0], type(small_scene.primitives[1]))  # Box first
    assert scene.primitives[1].radius == pytest.approx(1.0)


def test_scene_file_requires_primitives(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("seed = 1\n")
    with pytest.raises(ValueError):
        load_scene(path)
