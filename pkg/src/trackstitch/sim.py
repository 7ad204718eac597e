"""Synthetic circuit generator: track geometry, camera runs, chunked data.

A track is a planar centerline built from straight and constant-curvature
arc segments, with vertical walls at both sides of the corridor and a
ground plane.  The camera drives the centerline at constant speed and
height, facing forward (optical axis along the direction of travel,
image y axis pointing down).

``synth_chunks`` turns a ground-truth run into per-chunk monocular-style
reconstructions.  Each chunk lives in its own gauge: a random similarity
(rotation, translation, scale) relating chunk coordinates to the world.
Odometry noise is a random walk on the relative pose between consecutive
frames, optionally with a deterministic per-chunk rotation bias and a
slow multiplicative scale creep.  Point measurements are sampled on real
track surfaces ahead of the camera, perturbed in world space, and stored
in chunk coordinates.

Reproducibility: every random quantity derives from named
``SeedSequence`` streams keyed by (seed, stream kind, chunk or frame
index), so a frame shared by two overlapping chunks carries bit-identical
physical samples in both, and repeated runs reproduce byte-identical
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chunkio import ChunkReconstruction, FrameRecord, Intrinsics, Trajectory
from .geometry import Pose, Rotation, Sim3Transform
from .preprocess import ChunkPlan, MaskSpec, VideoMeta

_CLOSURE_POS_TOL = 1e-6
_CLOSURE_HEADING_TOL = 1e-9
_CONFIDENCE_DISTANCE = 20.0  # e-folding distance for point confidence
_MIN_CAMERA_DEPTH = 0.5

# camera orientation at heading zero: optical axis +x, image right -y, image down -z
_R_CAM0 = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class TrackSegment:
    kind: str  # "straight" or "arc"
    length: float  # centerline arc length
    curvature: float  # signed 1/radius; positive turns left; 0 for straights
    s0: float  # cumulative arc length at segment start
    x0: float
    y0: float
    heading0: float


class TrackModel:
    """Closed-form centerline with corridor walls and ground."""

    def __init__(
        self,
        segments,
        width: float = 8.0,
        wall_height: float = 2.5,
        elevation_amplitude: float = 0.0,
        elevation_periods: int = 2,
    ):
        if width <= 0 or wall_height <= 0:
            raise ValueError("width and wall_height must be positive")
        if elevation_amplitude < 0 or elevation_periods < 1:
            raise ValueError("bad elevation profile")
        self.segments: tuple[TrackSegment, ...] = tuple(segments)
        if not self.segments:
            raise ValueError("track needs at least one segment")
        self.width = float(width)
        self.wall_height = float(wall_height)
        self.elevation_amplitude = float(elevation_amplitude)
        self.elevation_periods = int(elevation_periods)
        self._s0 = np.array([seg.s0 for seg in self.segments])
        self.length = self.segments[-1].s0 + self.segments[-1].length
        ex, ey, eh = self._end_state()
        self.closed = (
            math.hypot(ex, ey) <= _CLOSURE_POS_TOL
            and abs(_wrap_angle(eh)) <= _CLOSURE_HEADING_TOL
        )

    def _end_state(self):
        seg = self.segments[-1]
        x, y, h = _advance_segment(seg.x0, seg.y0, seg.heading0, seg)
        return x, y, h

    @property
    def half_width(self) -> float:
        return self.width / 2.0

    def wrap(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.length)
        if np.any(s < -1e-9) or np.any(s > self.length + 1e-9):
            raise ValueError("arc length outside an open track")
        return np.clip(s, 0.0, self.length)

    def frame_at(self, s):
        """Centerline pose at arc length ``s``: (x, y, heading), vectorized."""
        s = self.wrap(s)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        idx = np.clip(np.searchsorted(self._s0, s, side="right") - 1, 0, len(self.segments) - 1)
        x = np.empty_like(s)
        y = np.empty_like(s)
        h = np.empty_like(s)
        for i, seg in enumerate(self.segments):
            m = idx == i
            if not np.any(m):
                continue
            ds = s[m] - seg.s0
            if seg.curvature == 0.0:
                x[m] = seg.x0 + ds * math.cos(seg.heading0)
                y[m] = seg.y0 + ds * math.sin(seg.heading0)
                h[m] = seg.heading0
            else:
                k = seg.curvature
                h2 = seg.heading0 + k * ds
                x[m] = seg.x0 + (np.sin(h2) - math.sin(seg.heading0)) / k
                y[m] = seg.y0 - (np.cos(h2) - math.cos(seg.heading0)) / k
                h[m] = h2
        if scalar:
            return float(x[0]), float(y[0]), float(h[0])
        return x, y, h

    def curvature_at(self, s):
        s = np.atleast_1d(self.wrap(s))
        idx = np.clip(np.searchsorted(self._s0, s, side="right") - 1, 0, len(self.segments) - 1)
        curv = np.array([seg.curvature for seg in self.segments])
        return curv[idx]

    def elevation_at(self, s):
        """Centerline height above the base plane (sinusoidal, periodic on a lap)."""
        if self.elevation_amplitude == 0.0:
            return np.zeros_like(np.asarray(s, dtype=float))
        s = np.asarray(self.wrap(s), dtype=float)
        return self.elevation_amplitude * np.sin(
            2.0 * math.pi * self.elevation_periods * s / self.length
        )


def _advance_segment(x, y, h, seg: TrackSegment):
    if seg.curvature == 0.0:
        return x + seg.length * math.cos(h), y + seg.length * math.sin(h), h
    k = seg.curvature
    h2 = h + k * seg.length
    x2 = x + (math.sin(h2) - math.sin(h)) / k
    y2 = y - (math.cos(h2) - math.cos(h)) / k
    return x2, y2, h2


def _build_segments(specs):
    segments = []
    x = y = h = s = 0.0
    for i, spec in enumerate(specs):
        kind = spec[0]
        if kind == "straight":
            if len(spec) != 2:
                raise ValueError(f"segment {i}: straight takes (length,)")
            length, curvature = float(spec[1]), 0.0
        elif kind == "arc":
            if len(spec) != 3:
                raise ValueError(f"segment {i}: arc takes (angle, radius)")
            angle, radius = float(spec[1]), float(spec[2])
            if radius <= 0:
                raise ValueError(f"segment {i}: radius must be positive")
            if angle == 0.0 or abs(angle) > 2.0 * math.pi:
                raise ValueError(f"segment {i}: arc angle must be nonzero and at most a full turn")
            length = abs(angle) * radius
            curvature = math.copysign(1.0, angle) / radius
        else:
            raise ValueError(f"segment {i}: unknown kind {kind!r}")
        if length <= 0:
            raise ValueError(f"segment {i}: length must be positive")
        seg = TrackSegment(kind, length, curvature, s, x, y, h)
        segments.append(seg)
        x, y, h = _advance_segment(x, y, h, seg)
        s += length
    return segments, (x, y, h)


def _closing_specs(x, y, h):
    """Arc-plus-straight return to the origin pose, or raise if none exists."""
    h_wrapped = _wrap_angle(h)
    if abs(h_wrapped) <= _CLOSURE_HEADING_TOL:
        if abs(y) > _CLOSURE_POS_TOL:
            raise ValueError("cannot auto-close: lateral offset with no heading error")
        if x > _CLOSURE_POS_TOL:
            raise ValueError("cannot auto-close: endpoint ahead of the start")
        return [("straight", -x)] if -x > _CLOSURE_POS_TOL else []
    if abs(y) <= _CLOSURE_POS_TOL:
        raise ValueError("cannot auto-close: heading error with no lateral offset")
    kappa = (1.0 - math.cos(h)) / y
    delta = (-h) % (2.0 * math.pi)
    if kappa < 0.0:
        delta -= 2.0 * math.pi
    x_after = x - math.sin(h) / kappa
    if x_after > _CLOSURE_POS_TOL:
        raise ValueError("cannot auto-close: closing arc lands ahead of the start")
    out = [("arc", delta, 1.0 / abs(kappa))]
    if -x_after > _CLOSURE_POS_TOL:
        out.append(("straight", -x_after))
    return out


def make_track(
    specs,
    width: float = 8.0,
    wall_height: float = 2.5,
    auto_close: bool = False,
    allow_open: bool = False,
    elevation_amplitude: float = 0.0,
    elevation_periods: int = 2,
):
    """Build a track from ('straight', length) / ('arc', angle, radius) specs.

    Angles are signed radians, positive turning left.  A spec whose end pose
    does not coincide with its start pose is rejected unless ``auto_close``
    (append at most one arc and one straight to return exactly to the start)
    or ``allow_open`` (keep the track open-ended) is set.
    """
    specs = list(specs)
    if auto_close:
        _, (x, y, h) = _build_segments(specs)
        specs += _closing_specs(x, y, h)
    segments, (x, y, h) = _build_segments(specs)
    gap = math.hypot(x, y)
    heading_gap = abs(_wrap_angle(h))
    if not allow_open and (gap > _CLOSURE_POS_TOL or heading_gap > _CLOSURE_HEADING_TOL):
        raise ValueError(
            f"track does not close: displacement {gap:.6g} m, heading gap "
            f"{heading_gap:.6g} rad (pass auto_close=True or allow_open=True)"
        )
    return TrackModel(
        segments,
        width=width,
        wall_height=wall_height,
        elevation_amplitude=elevation_amplitude,
        elevation_periods=elevation_periods,
    )


# Street-circuit preset: a closed lap with one hairpin, a kilometre-scale
# flat-out stretch and a mix of sweeps and tight corners, rescaled so one
# lap measures exactly `length` along the centerline.
_STREET_CIRCUIT_SPECS = [
    ("straight", 230.0),
    ("arc", 0.30, 100.0),
    ("straight", 110.0),
    ("arc", -0.55, 40.0),
    ("straight", 130.0),
    ("arc", 1.50, 38.0),
    ("straight", 70.0),
    ("arc", -1.10, 28.0),
    ("straight", 120.0),
    ("arc", 2.90, 15.0),  # hairpin
    ("straight", 50.0),
    ("arc", -0.80, 30.0),
    ("arc", 0.95, 60.0),
    ("straight", 540.0),
    ("arc", -0.45, 55.0),
    ("arc", 1.30, 35.0),
    ("straight", 120.0),
]


def monaco_like(length: float = 3338.0, width: float = 8.0, wall_height: float = 2.5):
    """Closed street-circuit preset scaled to the requested lap length."""
    _, (x, y, h) = _build_segments(_STREET_CIRCUIT_SPECS)
    specs = _STREET_CIRCUIT_SPECS + _closing_specs(x, y, h)
    base = sum(s[1] if s[0] == "straight" else abs(s[1]) * s[2] for s in specs)
    f = length / base
    scaled = [
        ("straight", s[1] * f) if s[0] == "straight" else ("arc", s[1], s[2] * f) for s in specs
    ]
    return make_track(scaled, width=width, wall_height=wall_height)


def square(
    side: float = 20.0, corner_radius: float = 10.0, width: float = 8.0, wall_height: float = 2.5
):
    """Rounded square: four straights joined by four 90-degree left arcs."""
    specs = []
    for _ in range(4):
        specs.append(("straight", side))
        specs.append(("arc", math.pi / 2.0, corner_radius))
    return make_track(specs, width=width, wall_height=wall_height)


TRACK_PRESETS = {"monaco-like": monaco_like, "square": square}


_Q_CAM0 = Rotation.from_matrix(_R_CAM0)


def camera_rotation(heading: float) -> Rotation:
    """Camera-to-world rotation for a camera facing along ``heading``."""
    half = heading / 2.0
    qz = Rotation([math.cos(half), 0.0, 0.0, math.sin(half)])
    return qz.compose(_Q_CAM0)


@dataclass(frozen=True)
class SlowInTurns:
    """Speed profile that brakes for arcs: v_straight on straights, v_turn in turns."""

    v_straight: float
    v_turn: float

    def __post_init__(self):
        if self.v_straight <= 0 or self.v_turn <= 0:
            raise ValueError("profile speeds must be positive")


def _arc_length_schedule(track: TrackModel, speed, fps, num_frames, laps):
    """Centerline arc positions s_i and per-frame speeds for a drive."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    if isinstance(speed, SlowInTurns):
        if num_frames is not None and num_frames < 1:
            raise ValueError("need at least one frame")
        total = laps * track.length
        s_list = [0.0]
        while True:
            here = s_list[-1]
            v = speed.v_turn if float(track.curvature_at(here)[0]) != 0.0 else speed.v_straight
            nxt = here + v / fps
            if num_frames is None:
                if nxt > total:
                    break
            elif len(s_list) == num_frames:
                break
            s_list.append(nxt)
        s = np.asarray(s_list)
        v = np.array(
            [
                speed.v_turn if float(track.curvature_at(si)[0]) != 0.0 else speed.v_straight
                for si in s_list
            ]
        )
        return s, v
    speed = float(speed)
    if speed <= 0:
        raise ValueError("speed and fps must be positive")
    if num_frames is None:
        num_frames = int(math.floor(laps * track.length / speed * fps)) + 1
    if num_frames < 1:
        raise ValueError("need at least one frame")
    s = speed * np.arange(num_frames) / fps
    return s, np.full(num_frames, speed)


def sample_trajectory(
    track: TrackModel,
    speed,
    fps: float,
    num_frames: int | None = None,
    laps: float = 1.0,
    camera_height: float = 1.0,
) -> Trajectory:
    """Ground-truth camera trajectory driving the centerline.

    ``speed`` is either a constant (m/s) or a SlowInTurns profile.
    """
    s, _ = _arc_length_schedule(track, speed, fps, num_frames, laps)
    if len(s) < 1:
        raise ValueError("need at least one frame")
    if not track.closed and s[-1] > track.length + 1e-9:
        raise ValueError("trajectory runs off the end of an open track")
    x, y, h = track.frame_at(s)
    z = camera_height + track.elevation_at(s)
    poses = [
        Pose(camera_rotation(float(hi)), [float(xi), float(yi), float(zi)])
        for xi, yi, hi, zi in zip(x, y, h, z)
    ]
    return Trajectory(np.arange(len(s)) / fps, poses)


def curvature_of(
    track: TrackModel, speed, fps: float, num_frames: int | None = None, laps: float = 1.0
) -> np.ndarray:
    """Per-frame signed heading change (radians per frame) along the drive."""
    s, v = _arc_length_schedule(track, speed, fps, num_frames, laps)
    if not track.closed:
        s = np.clip(s, 0.0, track.length)
    return track.curvature_at(s) * v / fps


# ---------------------------------------------------------------------------
# noise model


@dataclass(frozen=True)
class NoiseModel:
    sigma_t: float = 0.0  # m, translation random-walk increment per frame
    sigma_r: float = 0.0  # rad, rotation random-walk increment per frame
    rot_drift_per_frame: float = 0.0  # rad/frame bias about a per-chunk axis
    scale_drift_per_frame: float = 0.0  # relative scale creep per frame
    sigma_point: float = 0.0  # m, isotropic world-space point noise
    gauge_rot_max: float = 0.0  # rad, per-chunk gauge rotation angle bound
    gauge_trans_max: float = 0.0  # m, per-chunk gauge translation bound
    gauge_log_scale_sigma: float = 0.0  # per-chunk log-scale jitter


NOISE_PRESETS: dict[str, NoiseModel] = {
    "none": NoiseModel(),
    "gauges": NoiseModel(gauge_rot_max=math.pi, gauge_trans_max=100.0, gauge_log_scale_sigma=0.3),
    "mild": NoiseModel(
        sigma_t=0.01,
        sigma_r=0.0001,
        sigma_point=0.01,
        gauge_rot_max=math.pi,
        gauge_trans_max=20.0,
        gauge_log_scale_sigma=0.005,
    ),
    "moderate": NoiseModel(
        sigma_t=0.05,
        sigma_r=0.0005,
        rot_drift_per_frame=0.0005,
        sigma_point=0.05,
        gauge_rot_max=math.pi,
        gauge_trans_max=50.0,
        gauge_log_scale_sigma=0.01,
    ),
    "severe": NoiseModel(
        sigma_t=0.15,
        sigma_r=0.002,
        rot_drift_per_frame=0.002,
        scale_drift_per_frame=0.0002,
        sigma_point=0.15,
        gauge_rot_max=math.pi,
        gauge_trans_max=100.0,
        gauge_log_scale_sigma=0.05,
    ),
}

# stream kinds for SeedSequence(seed, kind, index)
_STREAM_ODOMETRY = 0
_STREAM_GAUGE = 1
_STREAM_FRAME = 2
_STREAM_SURFACE = 3


@dataclass
class SynthResult:
    chunks: list[ChunkReconstruction]
    gauges: list[Sim3Transform]  # chunk-local coordinates -> world
    ground_truth: Trajectory
    track: TrackModel
    speed: float = 0.0


def _sample_gauge(rng, noise: NoiseModel) -> Sim3Transform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, noise.gauge_rot_max) if noise.gauge_rot_max > 0 else 0.0
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(0.0, noise.gauge_trans_max) if noise.gauge_trans_max > 0 else 0.0
    log_s = rng.normal() * noise.gauge_log_scale_sigma
    return Sim3Transform(math.exp(log_s), Rotation.exp(axis * angle), direction * radius)


def _surface_lattice(track: TrackModel, seed: int, count: int, look_ahead: float):
    """Jittered surface landmarks shared by every frame of one run.

    Frames observe the same physical features, so two views of the same
    stretch of track report coincident world points (up to per-frame
    measurement noise); that repeatability is what downstream point
    registration keys on.  The pitch is sized so roughly ``count`` cells
    fall inside one look-ahead window.  Returns (s, lat, h) arrays sorted
    by arc length, where lat is the signed lateral offset and h the height
    above the local ground.
    """
    cross = 2.0 * track.half_width + 2.0 * track.wall_height
    pitch = math.sqrt(look_ahead * cross / max(count, 1))
    n_s = max(1, int(round(track.length / pitch)))
    p_s = track.length / n_s
    n_lat = max(1, int(round(2.0 * track.half_width / pitch)))
    n_z = max(1, int(round(track.wall_height / pitch)))

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_SURFACE]))
    rows = []
    k_s = np.arange(n_s)
    for band in range(n_lat):  # ground rows
        u, v = rng.random(size=(2, n_s))
        s = (k_s + u) * p_s
        lat = (-track.half_width) + (band + v) * (2.0 * track.half_width / n_lat)
        rows.append((s, lat, np.zeros(n_s)))
    for side in (track.half_width, -track.half_width):  # wall rows
        for band in range(n_z):
            u, v = rng.random(size=(2, n_s))
            s = (k_s + u) * p_s
            h = (band + v) * (track.wall_height / n_z)
            rows.append((s, np.full(n_s, side), h))
    s = np.concatenate([r[0] for r in rows])
    lat = np.concatenate([r[1] for r in rows])
    h = np.concatenate([r[2] for r in rows])
    order = np.argsort(s, kind="stable")
    return s[order], lat[order], h[order]


def _sample_frame_points(
    rng,
    track: TrackModel,
    pose: Pose,
    s_cam: float,
    lattice,
    intrinsics: Intrinsics,
    meta: VideoMeta,
    noise: NoiseModel,
    mask: MaskSpec | None,
    look_ahead: float,
):
    """Lattice landmarks visible from ``pose``, with pixels and confidence.

    Takes the look-ahead window of the shared lattice, projects it, and
    keeps what lands in the image; the per-frame rng only draws the
    measurement noise.  Returns (noisy world points, pixels of the
    noiseless points, confidences).
    """
    ls, llat, lh = lattice
    lo = track.wrap(s_cam) if track.closed else min(max(s_cam, 0.0), track.length)
    hi = lo + look_ahead
    a = np.searchsorted(ls, lo)
    if track.closed and hi > track.length:
        idx = np.concatenate([np.arange(a, len(ls)), np.arange(0, np.searchsorted(ls, hi - track.length))])
    else:
        idx = np.arange(a, np.searchsorted(ls, min(hi, track.length)))
    s_pt, lat, h = ls[idx], llat[idx], lh[idx]

    cx, cy, ch = track.frame_at(s_pt)
    nx, ny = -np.sin(ch), np.cos(ch)
    pts = np.column_stack([cx + lat * nx, cy + lat * ny, h + track.elevation_at(s_pt)])

    cam = pose.inverse().apply(pts)
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / depth + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / depth + intrinsics.cy
    ok = (
        (depth > _MIN_CAMERA_DEPTH)
        & (u >= 0.0)
        & (u < meta.width)
        & (v >= 0.0)
        & (v < meta.height)
    )
    if mask is not None:
        ok &= ~mask.masked(u, v, meta.width, meta.height)
    keep = np.flatnonzero(ok)
    eta = rng.normal(size=(keep.size, 3))
    return (
        pts[keep] + noise.sigma_point * eta,
        np.column_stack([u[keep], v[keep]]),
        np.exp(-np.linalg.norm(cam[keep], axis=1) / _CONFIDENCE_DISTANCE),
    )


def synth_chunks(
    track: TrackModel,
    meta: VideoMeta,
    plan: ChunkPlan,
    *,
    speed,
    noise: NoiseModel | str = "none",
    seed: int = 0,
    points_per_frame: int = 150,
    camera_height: float = 1.0,
    intrinsics: Intrinsics | None = None,
    mask: MaskSpec | None = None,
    look_ahead: float = 40.0,
) -> SynthResult:
    """Generate per-chunk reconstructions with independent gauges and noise.

    ``points_per_frame`` sizes the shared surface lattice so that roughly
    that many landmarks fall in one look-ahead window; the per-frame count
    varies with what actually projects into the image.
    """
    if isinstance(noise, str):
        noise = NOISE_PRESETS[noise]
    if plan.num_frames != meta.num_frames:
        raise ValueError("chunk plan and video metadata disagree on frame count")
    if intrinsics is None:
        intrinsics = Intrinsics(0.625 * meta.width, 0.625 * meta.width, meta.width / 2.0, meta.height / 2.0)

    gt = sample_trajectory(track, speed, meta.fps, meta.num_frames, camera_height=camera_height)
    arc, _ = _arc_length_schedule(track, speed, meta.fps, meta.num_frames, 1.0)
    lattice = _surface_lattice(track, seed, points_per_frame, look_ahead)

    frame_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}

    def frame_sample(f: int):
        if f not in frame_cache:
            rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_FRAME, f]))
            pts, px, conf = _sample_frame_points(
                rng, track, gt.poses[f], float(arc[f]), lattice,
                intrinsics, meta, noise, mask, look_ahead,
            )
            cam = gt.poses[f].inverse().apply(pts)
            frame_cache[f] = (pts, px, conf, cam)
        return frame_cache[f]

    chunks: list[ChunkReconstruction] = []
    gauges: list[Sim3Transform] = []
    for spec in plan.chunks:
        rng_o = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_ODOMETRY, spec.chunk_id]))
        rng_g = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_GAUGE, spec.chunk_id]))
        gauge = _sample_gauge(rng_g, noise)
        gauge_inv = gauge.inverse()

        drift_axis = rng_o.normal(size=3)
        drift_axis /= np.linalg.norm(drift_axis)

        frames_idx = list(range(spec.start_frame, spec.end_frame + 1))
        chain: list[Pose] = [gt.poses[frames_idx[0]]]
        rho = [1.0]
        for m in range(1, len(frames_idx)):
            prev_f, cur_f = frames_idx[m - 1], frames_idx[m]
            rel = gt.poses[prev_f].inverse().compose(gt.poses[cur_f])
            rho.append(rho[-1] * (1.0 + noise.scale_drift_per_frame))
            rotvec = noise.sigma_r * rng_o.normal(size=3) + noise.rot_drift_per_frame * drift_axis
            t_noise = noise.sigma_t * rng_o.normal(size=3)
            rel_noisy = Pose(
                rel.rotation.compose(Rotation.exp(rotvec)),
                rho[-1] * rel.translation + t_noise,
            )
            chain.append(chain[-1].compose(rel_noisy))

        records = []
        for m, f in enumerate(frames_idx):
            pts, px, conf, cam = frame_sample(f)
            local_pose = gauge_inv.transform_pose(chain[m])
            local_pts = local_pose.apply(cam * (rho[m] / gauge.scale))
            records.append(
                FrameRecord(
                    frame=f,
                    timestamp=f / meta.fps,
                    pose=local_pose,
                    intrinsics=intrinsics,
                    points=local_pts,
                    pixels=px.copy(),
                    confidence=conf.copy(),
                )
            )
        chunks.append(ChunkReconstruction(spec.chunk_id, records))
        gauges.append(gauge)
    return SynthResult(chunks, gauges, gt, track, speed)
