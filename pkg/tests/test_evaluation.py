"""Metric sanity checks with hand-computable expected values."""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest

from trackstitch.chunkio import Trajectory
from trackstitch.evaluation import (
    associate,
    ate,
    cloud_error,
    curvature_from_trajectory,
    endpoint_gap,
    rpe,
)
from trackstitch.geometry import Pose, Rotation, Sim3Transform
from trackstitch.sim import curvature_of, make_track, sample_trajectory, square


def _circle_traj(num_frames=60, r=120.0, fps=10.0, speed=12.0):
    track = make_track([("arc", 2.0 * math.pi, r)])
    return sample_trajectory(track, speed, fps, num_frames=num_frames), track


def _shift(traj, offset):
    poses = [Pose(p.rotation, p.translation + np.asarray(offset)) for p in traj.poses]
    return Trajectory(traj.timestamps, poses)


def _transform(traj, sim3):
    return Trajectory(traj.timestamps, [sim3.transform_pose(p) for p in traj.poses])


# ---------------------------------------------------------------------------
# association


def test_associate_identical_grids():
    traj, _ = _circle_traj(20)
    ie, ig = associate(traj, traj)
    assert np.array_equal(ie, np.arange(20))
    assert np.array_equal(ig, np.arange(20))


def test_associate_offset_within_tolerance():
    traj, _ = _circle_traj(20)
    est = Trajectory(np.asarray(traj.timestamps) + 0.003, list(traj.poses))
    ie, ig = associate(est, traj, max_dt=0.01)
    assert len(ie) == 20
    assert np.array_equal(ie, ig)


def test_associate_drops_far_pairs():
    traj, _ = _circle_traj(20)
    # estimate misses every other sample and is shifted by more than max_dt
    est = Trajectory(np.asarray(traj.timestamps)[::2] + 0.04, list(traj.poses)[::2])
    with pytest.raises(ValueError, match="no temporal overlap"):
        associate(est, traj, max_dt=0.01)


def test_associate_each_sample_used_once():
    traj, _ = _circle_traj(10)
    # denser estimate: two est samples bracket each gt sample
    ts = np.sort(np.concatenate([np.asarray(traj.timestamps), np.asarray(traj.timestamps) + 0.04]))
    poses = [traj.poses[0]] * len(ts)
    est = Trajectory(ts, poses)
    ie, ig = associate(est, traj, max_dt=0.05)
    assert len(ig) == len(set(ig.tolist()))
    assert len(ie) == len(set(ie.tolist()))
    assert len(ig) == 10


def test_associate_disjoint_ranges():
    traj, _ = _circle_traj(10)
    est = Trajectory(np.asarray(traj.timestamps) + 100.0, list(traj.poses))
    with pytest.raises(ValueError, match="no temporal overlap"):
        associate(est, traj)


# ---------------------------------------------------------------------------
# ATE


def test_ate_zero_for_identical():
    traj, _ = _circle_traj(30)
    m = ate(traj, traj, align="none")
    assert m.ate_rmse == 0.0
    assert m.ate_max == 0.0
    assert m.rpe_trans == 0.0
    assert m.rpe_rot == 0.0


def test_ate_unit_offset_unaligned_is_exactly_one():
    # integer ground-truth coordinates keep the +1 m shift exactly representable
    track = make_track([("straight", 100.0)], allow_open=True)
    traj = sample_trajectory(track, 10.0, 10.0)
    est = _shift(traj, [1.0, 0.0, 0.0])
    m = ate(est, traj, align="none")
    assert m.ate_rmse == 1.0
    assert m.ate_max == 1.0


def test_ate_sim3_alignment_is_gauge_invariant():
    traj, _ = _circle_traj(40)
    gauge = Sim3Transform(
        2.5, Rotation.exp([0.3, -0.4, 1.1]), np.array([25.0, -3.0, 7.0])
    )
    est = _transform(traj, gauge)
    m = ate(est, traj, align="sim3")
    assert m.ate_rmse < 1e-9
    assert m.ate_max < 1e-9
    # the fitted alignment undoes the gauge
    assert abs(m.alignment.scale - 1.0 / 2.5) < 1e-9


def test_ate_se3_handles_rigid_offset_but_not_scale():
    traj, _ = _circle_traj(40)
    rigid = Sim3Transform(1.0, Rotation.exp([0.0, 0.0, 0.7]), np.array([5.0, 1.0, 0.0]))
    m = ate(_transform(traj, rigid), traj, align="se3")
    assert m.ate_rmse < 1e-9
    scaled = _transform(traj, Sim3Transform(1.5, Rotation.identity(), np.zeros(3)))
    m2 = ate(scaled, traj, align="se3")
    assert m2.ate_rmse > 1.0  # scale error survives a rigid-only fit


def test_ate_rejects_unknown_mode_and_tiny_overlap():
    traj, _ = _circle_traj(10)
    with pytest.raises(ValueError, match="unknown alignment"):
        ate(traj, traj, align="affine")
    short = Trajectory(np.asarray(traj.timestamps)[:2], list(traj.poses)[:2])
    with pytest.raises(ValueError, match="at least 3"):
        ate(short, short)


# ---------------------------------------------------------------------------
# RPE


def test_rpe_exactly_invariant_under_global_rigid_transform():
    traj, _ = _circle_traj(40)
    rigid = Sim3Transform(1.0, Rotation.exp([0.2, 0.1, -0.5]), np.array([30.0, -2.0, 4.0]))
    t0, r0 = rpe(traj, traj, delta=4)
    t1, r1 = rpe(_transform(traj, rigid), traj, delta=4)
    assert t0 == 0.0 and r0 == 0.0
    assert t1 < 1e-12
    assert r1 < 1e-12


def test_rpe_single_yaw_injection_analytic():
    n, delta, err = 50, 5, 0.1
    traj, _ = _circle_traj(n)
    poses = list(traj.poses)
    m = 20
    poses[m] = poses[m].compose(Pose(Rotation.exp([0.0, 0.0, err]), np.zeros(3)))
    est = Trajectory(traj.timestamps, poses)
    _, r = rpe(est, traj, delta=delta)
    # two affected windows (one ending and one starting at the bad frame)
    expected = math.sqrt(2.0 * err**2 / (n - delta))
    assert abs(r - expected) < 1e-12


def test_rpe_validates_delta_and_window_count():
    traj, _ = _circle_traj(10)
    with pytest.raises(ValueError, match="at least 1"):
        rpe(traj, traj, delta=0)
    with pytest.raises(ValueError, match="associated pairs"):
        rpe(traj, traj, delta=10)


# ---------------------------------------------------------------------------
# endpoint gap


def test_endpoint_gap_simple():
    traj, _ = _circle_traj(10)
    pos = traj.positions()
    expected = float(np.linalg.norm(pos[-1] - pos[0]))
    assert abs(endpoint_gap(traj) - expected) < 1e-15


def test_endpoint_gap_closed_lap_near_zero():
    r, fps, k = 120.0, 10.0, 600
    track = make_track([("arc", 2.0 * math.pi, r)])
    lap = 2.0 * math.pi * r
    traj = sample_trajectory(track, lap * fps / k, fps, num_frames=k + 1)
    assert endpoint_gap(traj) < 1e-6


def test_endpoint_gap_needs_two_samples():
    traj, _ = _circle_traj(10)
    single = Trajectory(np.asarray(traj.timestamps)[:1], list(traj.poses)[:1])
    with pytest.raises(ValueError, match="at least 2"):
        endpoint_gap(single)


# ---------------------------------------------------------------------------
# curvature recovery


def test_curvature_from_trajectory_matches_generator():
    track = make_track([("arc", 2.0 * math.pi, 120.0)])
    traj = sample_trajectory(track, 12.0, 10.0, num_frames=80)
    got = curvature_from_trajectory(traj)
    want = curvature_of(track, 12.0, 10.0, num_frames=80)
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=1e-9)


def test_curvature_sign_for_right_turn():
    track = make_track([("arc", -math.pi, 50.0)], allow_open=True)
    traj = sample_trajectory(track, 10.0, 10.0)
    sig = curvature_from_trajectory(traj)
    assert np.all(sig < 0.0)


def test_curvature_needs_three_samples():
    traj, _ = _circle_traj(10)
    short = Trajectory(np.asarray(traj.timestamps)[:2], list(traj.poses)[:2])
    with pytest.raises(ValueError, match="at least 3"):
        curvature_from_trajectory(short)


# ---------------------------------------------------------------------------
# cloud error


def _surface_points(track, n=400, seed=0):
    """Points exactly on the walls and ground, plus their inward normals."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, track.length, size=n)
    x, y, h = track.frame_at(s)
    nx, ny = -np.sin(h), np.cos(h)
    w = track.half_width
    kind = rng.integers(0, 3, size=n)  # 0 ground, 1 left wall, 2 right wall
    lat = np.where(
        kind == 0,
        rng.uniform(-w + 0.5, w - 0.5, size=n),
        np.where(kind == 1, w, -w),
    )
    z = np.where(kind == 0, 0.0, rng.uniform(0.5, track.wall_height, size=n))
    pts = np.column_stack([x + lat * nx, y + lat * ny, z])
    # inward-pointing unit normals of each surface
    normals = np.zeros((n, 3))
    normals[kind == 0] = [0.0, 0.0, 1.0]
    normals[kind == 1, 0] = -nx[kind == 1]
    normals[kind == 1, 1] = -ny[kind == 1]
    normals[kind == 2, 0] = nx[kind == 2]
    normals[kind == 2, 1] = ny[kind == 2]
    return pts, normals


def test_cloud_error_zero_on_surfaces():
    track = square()
    pts, _ = _surface_points(track)
    assert cloud_error(pts, track) < 1e-9


def test_cloud_error_normal_offset_is_exact():
    track = square()
    pts, normals = _surface_points(track)
    assert abs(cloud_error(pts + 0.1 * normals, track) - 0.1) < 1e-9


def test_cloud_error_accepts_objects_with_points():
    track = square()
    pts, _ = _surface_points(track, n=50)
    assert cloud_error(SimpleNamespace(points=pts), track) < 1e-9


def test_cloud_error_monaco_surfaces():
    from trackstitch.sim import monaco_like

    track = monaco_like()
    pts, normals = _surface_points(track, n=600, seed=3)
    assert cloud_error(pts, track) < 1e-9
    assert abs(cloud_error(pts + 0.1 * normals, track) - 0.1) < 1e-9


def test_cloud_error_validation():
    track = square()
    with pytest.raises(ValueError, match="empty"):
        cloud_error(np.zeros((0, 3)), track)
    with pytest.raises(ValueError, match="\\(N, 3\\)"):
        cloud_error(np.zeros((4, 2)), track)
    hilly = make_track(
        [("arc", 2.0 * math.pi, 50.0)], elevation_amplitude=2.0
    )
    with pytest.raises(ValueError, match="flat"):
        cloud_error(np.zeros((4, 3)), hilly)
