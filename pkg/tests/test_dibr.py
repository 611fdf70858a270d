import numpy as np
import pytest

from trifield.camera import Intrinsics, Pose, SphericalOffset, project_point
from trifield.dibr import (ConstantHoleFiller, ConsistencyResidual, HoleFillError,
                           Keyframe, NearestHoleFiller, OracleHoleFiller, WarpResult,
                           build_supporting_database, consistency_residual,
                           splat_footprint, warp)
from trifield.synth import render_oracle, oracle_flow


def _plane_keyframe(camera, depth_value=4.0, seed=0):
    rng = np.random.default_rng(seed)
    h, w = camera.height, camera.width
    return Keyframe(image=rng.uniform(size=(h, w, 3)),
                    depth=np.full((h, w), depth_value),
                    pose=Pose.identity(),
                    valid_mask=np.ones((h, w), dtype=bool))


def test_keyframe_invariants(camera64):
    h, w = 4, 4
    with pytest.raises(ValueError):
        Keyframe(image=np.full((h, w, 3), 1.5), depth=np.ones((h, w)),
                 pose=Pose.identity(), valid_mask=np.ones((h, w), bool))
    with pytest.raises(ValueError):
        Keyframe(image=np.zeros((h, w, 3)), depth=np.zeros((h, w)),
                 pose=Pose.identity(), valid_mask=np.ones((h, w), bool))
    kf = Keyframe(image=np.zeros((h, w, 3)), depth=np.full((h, w), np.inf),
                  pose=Pose.identity(), valid_mask=np.ones((h, w), bool))
    assert kf.shape == (h, w)


def test_identity_warp_is_exact(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    result = warp(kf, Pose.identity(), camera64)
    assert np.array_equal(result.hole_mask, ~kf.valid_mask)
    assert np.array_equal(result.image[kf.valid_mask], kf.image[kf.valid_mask])
    assert np.array_equal(result.depth[kf.valid_mask], kf.depth[kf.valid_mask])
    assert np.allclose(result.flow[~result.hole_mask], 0.0)
    assert np.allclose(result.source_flow[kf.valid_mask], 0.0)


def test_translation_warp_uniform_disparity(camera64):
    d, tx = 4.0, 0.2
    kf = _plane_keyframe(camera64, depth_value=d)
    result = warp(kf, Pose(np.eye(3), np.array([tx, 0.0, 0.0])), camera64)
    expected_u = -camera64.fx * tx / d
    assert np.allclose(result.source_flow[..., 0], expected_u, atol=1e-12)
    assert np.allclose(result.source_flow[..., 1], 0.0, atol=1e-12)


def test_backward_motion_leaves_border_holes(camera64):
    d, back = 4.0, 1.0
    kf = _plane_keyframe(camera64, depth_value=d)
    target = Pose(np.eye(3), np.array([0.0, 0.0, -back]))
    result = warp(kf, target, camera64)
    # the plane's image footprint shrinks; compute the covered rectangle from
    # the projections of the source image corners
    corners = []
    for (u, v) in [(0, 0), (camera64.width - 1, 0), (0, camera64.height - 1),
                   (camera64.width - 1, camera64.height - 1)]:
        x = (u - camera64.cx) / camera64.fx * d
        y = (v - camera64.cy) / camera64.fy * d
        pixel, _ = project_point(camera64, target, [x, y, d])
        corners.append(pixel)
    corners = np.asarray(corners)
    u_min, v_min = corners.min(axis=0)
    u_max, v_max = corners.max(axis=0)
    uu, vv = np.meshgrid(np.arange(camera64.width), np.arange(camera64.height))
    interior = ((uu > u_min + 1) & (uu < u_max - 1) & (vv > v_min + 1) & (vv < v_max - 1))
    exterior = ((uu < u_min - 1) | (uu > u_max + 1) | (vv < v_min - 1) | (vv > v_max + 1))
    assert not result.hole_mask[interior].any()
    assert result.hole_mask[exterior].all()


def test_warp_drops_points_behind_camera(camera64):
    kf = _plane_keyframe(camera64, depth_value=1.0)
    result = warp(kf, Pose(np.eye(3), np.array([0.0, 0.0, 5.0])), camera64)
    assert result.hole_mask.all()
    assert np.isnan(result.source_flow).all()


def test_zbuffer_nearest_wins(camera64):
    # push the target far back so every source pixel collides near the center;
    # the nearest target depth must win
    h, w = camera64.height, camera64.width
    depth = np.full((h, w), 50.0)
    depth[3, 5] = 1.0
    image = np.zeros((h, w, 3))
    image[3, 5] = (1.0, 0.0, 0.0)
    kf = Keyframe(image=image, depth=depth, pose=Pose.identity(),
                  valid_mask=np.ones((h, w), bool))
    result = warp(kf, Pose(np.eye(3), np.array([0.0, 0.0, -500.0])), camera64)
    covered = ~result.hole_mask
    assert covered.sum() >= 1
    winners = result.image[covered]
    assert np.allclose(winners[np.argmin(result.depth[covered])], (1.0, 0.0, 0.0))


def test_zbuffer_tie_breaks_by_source_index(camera64):
    # the whole constant-depth image collapses onto a couple of target pixels;
    # among equal depths the smallest source linear index must win
    h, w = camera64.height, camera64.width
    image = np.zeros((h, w, 3))
    image[0, 0] = (1.0, 0.0, 0.0)
    kf = Keyframe(image=image, depth=np.full((h, w), 2.0), pose=Pose.identity(),
                  valid_mask=np.ones((h, w), bool))
    result = warp(kf, Pose(np.eye(3), np.array([0.0, 0.0, -4000.0])), camera64)
    landing = np.rint(np.array([0.0, 0.0]) + result.source_flow[0, 0]).astype(int)
    winner = result.image[landing[1], landing[0]]
    assert np.allclose(winner, (1.0, 0.0, 0.0))  # source index 0 beats all ties


def test_splat_radius_zero_is_identity(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    warped = warp(kf, Pose(np.eye(3), np.array([0.1, 0.0, 0.0])), camera64)
    again = splat_footprint(warped, 0)
    assert again is warped


def test_splat_single_pixel_covers_nine(camera64):
    h, w = 8, 8
    depth = np.full((h, w), np.inf)
    depth[4, 4] = 2.0
    image = np.zeros((h, w, 3))
    image[4, 4] = (0.0, 0.5, 1.0)
    flow = np.full((h, w, 2), np.nan)
    flow[4, 4] = (0.25, -0.5)
    warped = WarpResult(image=image, depth=depth, hole_mask=~np.isfinite(depth),
                        flow=flow, source_flow=flow.copy())
    grown = splat_footprint(warped, 1)
    assert (~grown.hole_mask).sum() == 9
    assert np.allclose(grown.image[3:6, 3:6], (0.0, 0.5, 1.0))
    assert np.allclose(grown.depth[3:6, 3:6], 2.0)
    assert np.allclose(grown.flow[3:6, 3:6], (0.25, -0.5))


def test_splat_no_holes_unchanged_cover(small_scene, camera64):
    scene_kf = render_oracle(small_scene, Pose.identity(), camera64)
    warped = warp(scene_kf, Pose.identity(), camera64)
    filled = splat_footprint(warped, 1)
    assert not filled.hole_mask[~warped.hole_mask].any()  # never unmark
    assert np.all(filled.depth <= warped.depth + 1e-15)   # never increase depth


def test_warp_flow_matches_oracle_flow(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    target = Pose(np.eye(3), np.array([0.15, -0.05, 0.1]))
    warped = warp(kf, target, camera64)
    flow, occluded = oracle_flow(small_scene, Pose.identity(), target, camera64)
    ok = ~occluded & np.isfinite(warped.source_flow).all(axis=-1)
    assert ok.sum() > 1000
    err = np.linalg.norm(warped.source_flow[ok] - flow[ok], axis=-1)
    assert err.max() <= 1e-9


def test_warp_round_trip_recovers_colors(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    target = Pose(np.eye(3), np.array([0.12, 0.0, 0.0]))
    there = warp(kf, target, camera64)
    kf_back = Keyframe(image=there.image, depth=np.where(there.hole_mask, np.inf, there.depth),
                       pose=target, valid_mask=~there.hole_mask)
    back = warp(kf_back, Pose.identity(), camera64)
    both = kf.valid_mask & ~back.hole_mask
    assert both.sum() > 500
    # within one pixel of resampling blur: compare against the best match in a
    # 3x3 neighborhood of the original
    best = np.full(both.shape, np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.roll(kf.image, (dy, dx), axis=(0, 1))
            diff = np.abs(back.image - shifted).max(axis=-1)
            best = np.minimum(best, diff)
    assert np.quantile(best[both], 0.99) < 0.05


def test_build_database_zero_radius_copies(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    offsets = [SphericalOffset(0.0, 0.0, 0.0)] * 3
    db = build_supporting_database(kf, camera64, offsets, ConstantHoleFiller())
    assert len(db) == 4
    for frame in db[1:]:
        assert np.array_equal(frame.image[kf.valid_mask], kf.image[kf.valid_mask])
        assert frame.valid_mask.all()


def test_build_database_oracle_filler_matches_oracle(flat_scene, camera64):
    # texture-free scene: landed pixels must agree with the oracle render
    # exactly (modulo rounding-independent flat shading) and holes are oracle
    kf = render_oracle(flat_scene, Pose.identity(), camera64)
    offsets = [SphericalOffset(np.pi / 2, phi, 0.2)
               for phi in np.linspace(-np.pi, np.pi, 4, endpoint=False)]
    db = build_supporting_database(kf, camera64, offsets, OracleHoleFiller(flat_scene),
                                   footprint_radius=1)
    from trifield.camera import spherical_neighbor_pose
    look = 2.0 * float(kf.depth[kf.valid_mask].mean())
    for offset, frame in zip(offsets, db[1:]):
        pose = spherical_neighbor_pose(Pose.identity(), offset, look)
        assert np.allclose(frame.pose.rotation, pose.rotation, atol=1e-12)
        oracle = render_oracle(flat_scene, pose, camera64)
        both = oracle.valid_mask
        assert np.abs(frame.image[both] - oracle.image[both]).max() <= 1e-6


def test_build_database_requires_offsets(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)
    with pytest.raises(ValueError):
        build_supporting_database(kf, camera64, [], ConstantHoleFiller())


def test_nearest_filler_copies_nearest(camera64):
    h, w = 6, 6
    depth = np.full((h, w), np.inf)
    image = np.zeros((h, w, 3))
    depth[2, 2] = 3.0
    image[2, 2] = (0.2, 0.4, 0.6)
    warped = WarpResult(image=image, depth=depth, hole_mask=~np.isfinite(depth),
                        flow=np.zeros((h, w, 2)), source_flow=np.zeros((h, w, 2)))
    filled_image, filled_depth = NearestHoleFiller().fill(warped, Pose.identity(), camera64)
    assert np.allclose(filled_image, (0.2, 0.4, 0.6))
    assert np.allclose(filled_depth, 3.0)


def test_nearest_filler_fails_on_all_holes(camera64):
    h, w = 4, 4
    warped = WarpResult(image=np.zeros((h, w, 3)), depth=np.full((h, w), np.inf),
                        hole_mask=np.ones((h, w), bool), flow=np.zeros((h, w, 2)),
                        source_flow=np.zeros((h, w, 2)))
    with pytest.raises(HoleFillError):
        NearestHoleFiller().fill(warped, Pose.identity(), camera64)


def test_database_propagates_filler_failure(small_scene, camera64):
    kf = render_oracle(small_scene, Pose.identity(), camera64)

    class Broken(NearestHoleFiller):
        def fill(self, warped, pose, camera):
            raise RuntimeError("boom")

    with pytest.raises(HoleFillError, match="offset 0"):
        build_supporting_database(kf, camera64, [SphericalOffset(np.pi / 2, 0.0, 0.3)],
                                  Broken())


def _warp_of(image, holes):
    h, w = holes.shape
    return WarpResult(image=image, depth=np.where(holes, np.inf, 1.0),
                      hole_mask=holes, flow=np.zeros((h, w, 2)),
                      source_flow=np.zeros((h, w, 2)))


def test_consistency_residual_cases():
    h, w = 5, 5
    image = np.random.default_rng(0).uniform(size=(h, w, 3))
    holes = np.zeros((h, w), bool)
    same = consistency_residual(image, np.ones((h, w), bool), _warp_of(image, holes))
    assert same.value == 0.0 and same.overlap == h * w

    base = np.full((h, w, 3), 0.3)
    offset = consistency_residual(base + 0.1, np.ones((h, w), bool),
                                  _warp_of(base, holes))
    assert offset.value == pytest.approx(0.01, abs=1e-12)

    disjoint = consistency_residual(image, np.zeros((h, w), bool), _warp_of(image, holes))
    assert disjoint == ConsistencyResidual(0.0, 0)


def test_consistency_residual_shape_mismatch():
    with pytest.raises(ValueError):
        consistency_residual(np.zeros((4, 4, 3)), np.ones((4, 4), bool),
                             _warp_of(np.zeros((5, 5, 3)), np.zeros((5, 5), bool)))
