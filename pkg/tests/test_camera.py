import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trifield.camera import (BehindCameraError, Intrinsics, Pose, Ray, SphericalOffset,
                             backproject_pixel, generate_rays, load_trajectory,
                             project_point, save_trajectory, spherical_neighbor_pose,
                             validate_trajectory)

from conftest import rotation_about

CAM = Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(ValueError):
        Intrinsics(fx=1.0, fy=1.0, cx=4.0, cy=0.0, width=4, height=4)


def test_pose_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 1] = 1e-6
    with pytest.raises(ValueError):
        Pose(bad, np.zeros(3))
    with pytest.raises(ValueError):
        Pose(-np.eye(3), np.zeros(3))  # det = -1


def test_ray_through_principal_point_is_optical_axis():
    (ray,) = generate_rays(CAM, Pose.identity(), [(CAM.cx, CAM.cy)])
    assert np.allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(ray.origin, 0.0)


def test_ray_one_focal_length_off_axis():
    # pinhole by hand: x = (u - cx) / fx = 1, so direction ~ (1, 0, 1)
    cam = Intrinsics(fx=60.0, fy=60.0, cx=64.0, cy=48.0, width=128, height=96)
    (ray,) = generate_rays(cam, Pose.identity(), [(cam.cx + cam.fx, cam.cy)])
    expected = np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0)
    assert np.allclose(ray.direction, expected, atol=1e-12)


def test_translation_moves_origin_only():
    pose = Pose(np.eye(3), np.array([3.0, -2.0, 1.0]))
    (moved,) = generate_rays(CAM, pose, [(10.0, 20.0)])
    (still,) = generate_rays(CAM, Pose.identity(), [(10.0, 20.0)])
    assert np.allclose(moved.origin, pose.translation)
    assert np.allclose(moved.direction, still.direction, atol=1e-15)


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError):
        generate_rays(CAM, Pose.identity(), [(CAM.width + 3.0, 0.0)])


def test_ray_directions_unit_and_corners_symmetric():
    cam = Intrinsics(fx=80.0, fy=80.0, cx=31.5, cy=31.5, width=64, height=64)
    corners = [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)]
    rays = generate_rays(cam, Pose.identity(), corners)
    for ray in rays:
        assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12
    zs = [ray.direction[2] for ray in rays]
    assert np.allclose(zs, zs[0], atol=1e-12)
    assert np.allclose(np.abs([r.direction[0] for r in rays]),
                       abs(rays[0].direction[0]), atol=1e-12)


def test_project_on_axis_point():
    pixel, depth = project_point(CAM, Pose.identity(), [0.0, 0.0, 2.5])
    assert np.allclose(pixel, [CAM.cx, CAM.cy])
    assert depth == pytest.approx(2.5)


def test_project_hand_value():
    cam = Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
    pixel, depth = project_point(cam, Pose.identity(), [1.0, 0.0, 2.0])
    assert np.allclose(pixel, [114.0, 48.0])  # u = fx * x / z + cx = 50 + 64
    assert depth == pytest.approx(2.0)


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project_point(CAM, Pose.identity(), [0.0, 0.0, -1.0])


def test_backproject_basics():
    assert np.allclose(backproject_pixel(CAM, Pose.identity(), (CAM.cx, CAM.cy), 1.0),
                       [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        backproject_pixel(CAM, Pose.identity(), (CAM.cx, CAM.cy), 0.0)


def test_backproject_rotated_pose():
    # 90 degrees about y: camera +z maps to world +x
    rot = rotation_about([0.0, 1.0, 0.0], math.pi / 2)
    point = backproject_pixel(CAM, Pose(rot, np.zeros(3)), (CAM.cx, CAM.cy), 1.0)
    assert np.allclose(point, rot @ np.array([0.0, 0.0, 1.0]), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_project_backproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    rot = rotation_about(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    pose = Pose(rot, rng.normal(size=3))
    pixel = np.array([rng.uniform(0, CAM.width - 1), rng.uniform(0, CAM.height - 1)])
    depth = rng.uniform(0.1, 50.0)
    point = backproject_pixel(CAM, pose, pixel, depth)
    pixel2, depth2 = project_point(CAM, pose, point)
    assert np.allclose(pixel2, pixel, atol=1e-9)
    assert abs(depth2 - depth) < 1e-9


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_pose_compose_inverse_identity(seed):
    rng = np.random.default_rng(seed)
    pose = Pose(rotation_about(rng.normal(size=3), rng.uniform(-np.pi, np.pi)),
                rng.normal(size=3))
    ident = pose.compose(pose.inverse())
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(ident.translation, 0.0, atol=1e-9)


def test_pose_composition_associative():
    rng = np.random.default_rng(0)
    poses = [Pose(rotation_about(rng.normal(size=3), rng.uniform(-np.pi, np.pi)),
                  rng.normal(size=3)) for _ in range(3)]
    a, b, c = poses
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    assert np.allclose(left.rotation, right.rotation, atol=1e-12)
    assert np.allclose(left.translation, right.translation, atol=1e-12)


def test_spherical_offset_validation():
    with pytest.raises(ValueError):
        SphericalOffset(theta=0.5, phi=0.0, r=-1.0)
    with pytest.raises(ValueError):
        SphericalOffset(theta=4.0, phi=0.0, r=1.0)


def test_spherical_zero_radius_keeps_pose():
    pose = Pose(rotation_about([0, 1, 0], 0.3), np.array([1.0, 2.0, 3.0]))
    neighbor = spherical_neighbor_pose(pose, SphericalOffset(0.7, 0.2, 0.0), 5.0)
    assert np.allclose(neighbor.center, pose.center)
    assert np.allclose(neighbor.rotation, pose.rotation)


def test_spherical_unit_offset_along_local_x():
    # theta=pi/2, phi=0 is +x in the camera frame; identity pose keeps it world +x
    neighbor = spherical_neighbor_pose(Pose.identity(),
                                       SphericalOffset(math.pi / 2, 0.0, 1.0), 10.0)
    assert np.allclose(neighbor.center, [1.0, 0.0, 0.0], atol=1e-12)


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi),
       st.floats(0.0, math.pi), st.floats(1e-3, 5.0))
@settings(max_examples=60, deadline=None)
def test_spherical_offsets_equidistant(phi1, phi2, theta, r):
    pose = Pose.identity()
    n1 = spherical_neighbor_pose(pose, SphericalOffset(theta, phi1, r), 8.0)
    n2 = spherical_neighbor_pose(pose, SphericalOffset(theta, phi2, r), 8.0)
    d1 = np.linalg.norm(n1.center - pose.center)
    d2 = np.linalg.norm(n2.center - pose.center)
    assert abs(d1 - r) < 1e-9 and abs(d2 - r) < 1e-9


def test_spherical_neighbor_aims_at_target():
    pose = Pose.identity()
    look = 6.0
    neighbor = spherical_neighbor_pose(pose, SphericalOffset(math.pi / 2, 1.1, 0.5), look)
    target = np.array([0.0, 0.0, look])
    to_target = target - neighbor.center
    to_target /= np.linalg.norm(to_target)
    assert np.allclose(neighbor.viewing_direction, to_target, atol=1e-12)


def test_validate_trajectory_forward_motion():
    poses = [Pose(np.eye(3), np.array([0.0, 0.0, float(z)])) for z in range(5)]
    assert validate_trajectory(poses) == [True] * 4


def test_validate_trajectory_strafe_is_rejected():
    poses = [Pose(np.eye(3), np.array([float(x), 0.0, 0.0])) for x in range(3)]
    assert validate_trajectory(poses, threshold=0.95) == [False, False]


def test_validate_trajectory_zero_displacement_is_smooth():
    poses = [Pose.identity(), Pose.identity()]
    assert validate_trajectory(poses) == [True]


def test_validate_trajectory_matches_hand_cosines():
    rng = np.random.default_rng(7)
    poses = [Pose(rotation_about(rng.normal(size=3), rng.uniform(-1, 1)),
                  rng.normal(size=3)) for _ in range(10)]
    flags = validate_trajectory(poses, threshold=0.4)
    for i in range(9):
        step = poses[i + 1].center - poses[i].center
        cos = step @ poses[i].rotation[:, 2] / np.linalg.norm(step)
        assert flags[i] == (cos >= 0.4)


def test_validate_trajectory_needs_two_poses():
    with pytest.raises(ValueError):
        validate_trajectory([Pose.identity()])


def test_trajectory_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    poses = [Pose(rotation_about(rng.normal(size=3), rng.uniform(-1, 1)),
                  rng.normal(size=3)) for _ in range(4)]
    path = tmp_path / "trajectory.txt"
    save_trajectory(path, poses, header="test poses")
    loaded = load_trajectory(path)
    assert len(loaded) == 4
    for a, b in zip(poses, loaded):
        assert np.allclose(a.rotation, b.rotation, atol=1e-15)
        assert np.allclose(a.translation, b.translation, atol=1e-15)
    assert path.read_text().startswith("# test poses")


def test_trajectory_rejects_malformed_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(ValueError):
        load_trajectory(path)


def test_ray_invariants():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), 0.1, 1.0)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 0.5)
