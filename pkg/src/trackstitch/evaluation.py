"""Trajectory and point-cloud quality metrics.

Estimated and reference trajectories are paired by nearest timestamp, then
compared either absolutely (ATE, after an optional global alignment that
removes gauge freedom) or relatively (RPE over a fixed frame offset, which
is immune to global placement).  Point clouds are scored by their RMS
distance to the nearest true track surface, computed in closed form per
segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chunkio import Trajectory
from .geometry import Sim3Transform
from .sim import TrackModel
from .stitch import umeyama

_DEFAULT_MAX_DT = 0.02  # s


@dataclass
class TrajectoryMetrics:
    """Summary record produced by ``ate``; distances in meters, angles in radians."""

    ate_rmse: float
    ate_max: float
    rpe_trans: float
    rpe_rot: float
    endpoint_gap: float
    alignment: Sim3Transform


def associate(
    est: Trajectory, gt: Trajectory, max_dt: float = _DEFAULT_MAX_DT
) -> tuple[np.ndarray, np.ndarray]:
    """Pair samples by nearest timestamp.

    Each sample is used at most once; candidate pairs are accepted greedily
    in order of ascending |dt| and pairs further apart than ``max_dt``
    seconds are dropped.  Returns (est indices, gt indices) sorted by
    estimate index.
    """
    te = np.asarray(est.timestamps, dtype=float)
    tg = np.asarray(gt.timestamps, dtype=float)
    right = np.searchsorted(tg, te)
    candidates = []
    for i, ti in enumerate(te):
        for j in (right[i] - 1, right[i]):
            if 0 <= j < len(tg):
                candidates.append((abs(ti - tg[j]), i, int(j)))
    candidates.sort()
    used_e: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for dt, i, j in candidates:
        if dt > max_dt:
            break
        if i in used_e or j in used_g:
            continue
        pairs.append((i, j))
        used_e.add(i)
        used_g.add(j)
    if not pairs:
        raise ValueError("no temporal overlap between trajectories")
    pairs.sort()
    idx_e, idx_g = zip(*pairs)
    return np.array(idx_e), np.array(idx_g)


def endpoint_gap(traj: Trajectory) -> float:
    """Distance between the first and last positions; needs no reference."""
    if len(traj) < 2:
        raise ValueError("endpoint gap needs at least 2 samples")
    pos = traj.positions()
    return float(np.linalg.norm(pos[-1] - pos[0]))


def rpe(
    est: Trajectory, gt: Trajectory, delta: int = 1, max_dt: float = _DEFAULT_MAX_DT
) -> tuple[float, float]:
    """Relative pose error over windows of ``delta`` associated frames.

    For each window the discrepancy E = (gt_i^-1 gt_{i+d})^-1 (est_i^-1
    est_{i+d}) is formed; returns the RMSE of its translation norm and of
    its rotation angle.  Left-multiplying either trajectory by a global
    rigid transform cancels out of E, so the rotation part is exactly
    invariant under re-gauging.
    """
    if delta < 1:
        raise ValueError("delta must be at least 1")
    idx_e, idx_g = associate(est, gt, max_dt)
    n = len(idx_e)
    if n <= delta:
        raise ValueError(f"need more than {delta} associated pairs for delta={delta}")
    t_err = np.empty(n - delta)
    r_err = np.empty(n - delta)
    for w in range(n - delta):
        pe = est.poses[idx_e[w]].inverse().compose(est.poses[idx_e[w + delta]])
        pg = gt.poses[idx_g[w]].inverse().compose(gt.poses[idx_g[w + delta]])
        err = pg.inverse().compose(pe)
        t_err[w] = np.linalg.norm(err.translation)
        r_err[w] = err.rotation.angle
    return float(np.sqrt(np.mean(t_err**2))), float(np.sqrt(np.mean(r_err**2)))


def ate(
    est: Trajectory,
    gt: Trajectory,
    align: str = "sim3",
    max_dt: float = _DEFAULT_MAX_DT,
    rpe_delta: int = 1,
) -> TrajectoryMetrics:
    """Absolute trajectory error after optional global alignment.

    ``align`` is one of "none", "se3" (rigid) or "sim3" (rigid plus scale);
    the fitted alignment maps estimate coordinates into reference
    coordinates and is returned in the metrics record.
    """
    if align not in ("none", "se3", "sim3"):
        raise ValueError(f"unknown alignment mode {align!r}")
    idx_e, idx_g = associate(est, gt, max_dt)
    if len(idx_e) < 3:
        raise ValueError(f"need at least 3 associated pairs, got {len(idx_e)}")
    pe = est.positions()[idx_e]
    pg = gt.positions()[idx_g]
    if align == "none":
        transform = Sim3Transform.identity()
        mapped = pe
    else:
        transform = umeyama(pe, pg, with_scale=align == "sim3")
        mapped = transform.apply(pe)
    residual = np.linalg.norm(mapped - pg, axis=1)
    rpe_trans, rpe_rot = rpe(est, gt, delta=rpe_delta, max_dt=max_dt)
    return TrajectoryMetrics(
        ate_rmse=float(np.sqrt(np.mean(residual**2))),
        ate_max=float(residual.max()),
        rpe_trans=rpe_trans,
        rpe_rot=rpe_rot,
        endpoint_gap=endpoint_gap(est),
        alignment=transform,
    )


def curvature_from_trajectory(traj: Trajectory) -> np.ndarray:
    """Per-frame signed yaw change (radians) recovered from consecutive poses.

    The heading is taken from the planar projection of each pose's optical
    axis; entry i holds the wrapped heading change from frame i to i+1 and
    the final frame repeats its neighbor so the signal has one value per
    frame.
    """
    if len(traj) < 3:
        raise ValueError("need at least 3 samples to estimate curvature")
    forward = np.array([p.rotation.apply([0.0, 0.0, 1.0]) for p in traj.poses])
    heading = np.arctan2(forward[:, 1], forward[:, 0])
    d = np.diff(heading)
    d = (d + math.pi) % (2.0 * math.pi) - math.pi
    return np.concatenate([d, d[-1:]])


def _left_normal(heading: float) -> np.ndarray:
    return np.array([-math.sin(heading), math.cos(heading)])


def _segment_surface_sq(track: TrackModel, seg, pts: np.ndarray) -> np.ndarray:
    """Minimal squared distance from each point to this segment's surfaces."""
    w = track.half_width
    height = track.wall_height
    xy = pts[:, :2]
    z = pts[:, 2]
    z_wall = z - np.clip(z, 0.0, height)
    candidates = []
    if seg.curvature == 0.0:
        f = np.array([math.cos(seg.heading0), math.sin(seg.heading0)])
        nvec = np.array([-f[1], f[0]])
        rel = xy - [seg.x0, seg.y0]
        along = rel @ f
        lat = rel @ nvec
        axial_sq = (along - np.clip(along, 0.0, seg.length)) ** 2
        candidates.append(axial_sq + (lat - np.clip(lat, -w, w)) ** 2 + z**2)
        candidates.append(axial_sq + (lat - w) ** 2 + z_wall**2)
        candidates.append(axial_sq + (lat + w) ** 2 + z_wall**2)
    else:
        k = seg.curvature
        nvec = np.array([-math.sin(seg.heading0), math.cos(seg.heading0)])
        center = np.array([seg.x0, seg.y0]) + nvec / k
        rel = xy - center
        r = np.linalg.norm(rel, axis=1)
        phi0 = math.atan2(-nvec[1] / k, -nvec[0] / k)
        u = (math.copysign(1.0, k) * (np.arctan2(rel[:, 1], rel[:, 0]) - phi0)) % (
            2.0 * math.pi
        )
        inside = u <= abs(k) * seg.length + 1e-12
        r_left = abs(1.0 / k - w)
        r_right = abs(1.0 / k + w)
        inner = max(0.0, abs(1.0 / k) - w)
        ground = (r - np.clip(r, inner, abs(1.0 / k) + w)) ** 2 + z**2
        for d2 in (ground, (r - r_left) ** 2 + z_wall**2, (r - r_right) ** 2 + z_wall**2):
            candidates.append(np.where(inside, d2, np.inf))
        # out-of-sweep points clamp to an end cross-section of the patch
        for s_end in (0.0, seg.length):
            h_end = seg.heading0 + k * s_end
            m = center - _left_normal(h_end) / k
            rel_end = xy - m
            f_end = np.array([math.cos(h_end), math.sin(h_end)])
            n_end = np.array([-f_end[1], f_end[0]])
            a_sq = (rel_end @ f_end) ** 2
            b = rel_end @ n_end
            candidates.append(a_sq + (b - np.clip(b, -w, w)) ** 2 + z**2)
            candidates.append(a_sq + (b - w) ** 2 + z_wall**2)
            candidates.append(a_sq + (b + w) ** 2 + z_wall**2)
    return np.minimum.reduce(candidates)


def cloud_error(cloud, track: TrackModel) -> float:
    """RMS distance from points to the nearest track surface (walls or ground).

    Accepts an (N, 3) array or any object with a ``points`` attribute.
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (N, 3) point array")
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")
    if track.elevation_amplitude != 0.0:
        raise ValueError("cloud_error supports flat tracks only")
    best = np.full(pts.shape[0], np.inf)
    for seg in track.segments:
        best = np.minimum(best, _segment_surface_sq(track, seg, pts))
    return float(np.sqrt(best.mean()))
