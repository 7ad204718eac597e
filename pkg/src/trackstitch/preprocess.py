"""Video chunk planning, pixel masking, and downsample recipes.

Chunks are inclusive frame ranges that tile the video; consecutive
chunks share exactly ``overlap_frames`` frames so that each seam has
common cameras to align on.  The turn-aware planner nudges boundaries
off high-yaw-rate frames because splits in the middle of a turn give
the weakest seam alignments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class VideoMeta:
    num_frames: int
    fps: float
    width: int
    height: int

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("frame size must be positive")


@dataclass(frozen=True)
class ChunkSpec:
    chunk_id: int
    start_frame: int
    end_frame: int

    @property
    def num_frames(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass(frozen=True)
class ChunkPlan:
    chunks: tuple[ChunkSpec, ...]
    overlap_frames: int
    num_frames: int
    boundary_violations: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.chunks:
            raise ValueError("plan has no chunks")
        prev = None
        for k, c in enumerate(self.chunks):
            if c.chunk_id != k:
                raise ValueError(f"chunk ids must be 0..n-1 in order, got {c.chunk_id} at {k}")
            if c.start_frame > c.end_frame:
                raise ValueError(f"chunk {k} is empty")
            if prev is not None:
                shared = prev.end_frame - c.start_frame + 1
                if shared != self.overlap_frames:
                    raise ValueError(
                        f"chunks {k - 1} and {k} share {shared} frames, "
                        f"expected {self.overlap_frames}"
                    )
            prev = c
        if self.chunks[0].start_frame != 0 or self.chunks[-1].end_frame != self.num_frames - 1:
            raise ValueError("plan does not cover the full frame range")

    def shared_frames(self, k: int) -> range:
        """Frames shared by chunks k-1 and k."""
        if k < 1 or k >= len(self.chunks):
            raise IndexError(f"no seam before chunk {k}")
        return range(self.chunks[k].start_frame, self.chunks[k - 1].end_frame + 1)


def plan_fixed_chunks(meta: VideoMeta, chunk_seconds: float, overlap_frames: int) -> ChunkPlan:
    """Tile the video into fixed-length chunks sharing overlap_frames frames.

    The final chunk may be shorter.  A tail adding fewer than 2 new
    frames is absorbed into the last chunk instead of becoming a
    degenerate sliver.
    """
    if overlap_frames < 1:
        raise ValueError("overlap_frames must be >= 1")
    length = int(round(chunk_seconds * meta.fps))
    if length < overlap_frames + 1:
        raise ValueError(
            f"degenerate chunking: {length} frames per chunk cannot carry "
            f"an overlap of {overlap_frames}"
        )
    n = meta.num_frames
    chunks: list[ChunkSpec] = []
    start = 0
    while True:
        end = min(start + length - 1, n - 1)
        chunks.append(ChunkSpec(len(chunks), start, end))
        if end == n - 1:
            break
        next_start = end - overlap_frames + 1
        remaining = (n - 1) - next_start + 1
        if remaining < min(overlap_frames + 2, length):
            # tail would be a sliver; stretch the current chunk instead
            chunks[-1] = ChunkSpec(chunks[-1].chunk_id, start, n - 1)
            break
        start = next_start
    return ChunkPlan(tuple(chunks), overlap_frames, n)


def plan_turn_aware_chunks(
    meta: VideoMeta,
    curvature: np.ndarray,
    chunk_seconds: float,
    overlap_frames: int,
    straight_threshold: float = 0.002,
    search_window_seconds: float = 2.0,
) -> ChunkPlan:
    """Fixed plan with boundaries nudged onto low-|yaw-rate| frames.

    Each internal boundary moves to the nearest frame within the search
    window whose |curvature| is at or below the threshold; when no frame
    in the window qualifies, the window's minimal-|curvature| frame is
    used and recorded in ``boundary_violations``.
    """
    curvature = np.asarray(curvature, dtype=float).reshape(-1)
    if curvature.shape[0] != meta.num_frames:
        raise ValueError(
            f"curvature has {curvature.shape[0]} entries for {meta.num_frames} frames"
        )
    if straight_threshold < 0:
        raise ValueError("straight_threshold must be >= 0")
    base = plan_fixed_chunks(meta, chunk_seconds, overlap_frames)
    window = int(round(search_window_seconds * meta.fps))
    length = int(round(chunk_seconds * meta.fps))
    if window >= length:
        raise ValueError(
            f"window too large: +-{window} frames spans an entire {length}-frame chunk"
        )
    if len(base.chunks) == 1 or window == 0:
        return base

    n = meta.num_frames
    starts = [c.start_frame for c in base.chunks]
    violations: list[int] = []
    abs_curv = np.abs(curvature)
    new_starts = [0]
    for idx in range(1, len(starts)):
        b0 = starts[idx]
        lo = new_starts[-1] + 2  # keep >= 2 fresh frames in the previous chunk
        hi = (starts[idx + 1] - 2) if idx + 1 < len(starts) else (n - 2)
        lo = max(lo, b0 - window)
        hi = min(hi, b0 + window)
        if lo > hi:
            lo = hi = max(new_starts[-1] + 2, min(b0, n - 2))
        chosen = None
        for off in range(0, window + 1):
            for cand in ((b0 - off, b0 + off) if off else (b0,)):
                if lo <= cand <= hi and abs_curv[cand] <= straight_threshold:
                    chosen = cand
                    break
            if chosen is not None:
                break
        if chosen is None:
            span = np.arange(lo, hi + 1)
            chosen = int(span[np.argmin(abs_curv[lo : hi + 1])])
            violations.append(chosen)
        new_starts.append(chosen)

    chunks = []
    for k, s in enumerate(new_starts):
        end = (new_starts[k + 1] + overlap_frames - 1) if k + 1 < len(new_starts) else (n - 1)
        chunks.append(ChunkSpec(k, s, end))
    return ChunkPlan(tuple(chunks), overlap_frames, n, tuple(violations))


# ---------------------------------------------------------------------------
# pixel masks


@dataclass(frozen=True)
class MaskSpec:
    """Region of each frame to discard (e.g. the car's own hood).

    ``mode`` is "bottom", "top", or "polygon".  Fractions are of frame
    height; polygon vertices are normalized (u, v) in [0, 1] with v
    growing downward.  Pixel tests use pixel centers: row r of an
    H-row frame has v = (r + 0.5) / H.
    """

    mode: str
    fraction: float = 0.0
    vertices: tuple[tuple[float, float], ...] = field(default=())

    def masked(self, u: np.ndarray, v: np.ndarray, width: int, height: int) -> np.ndarray:
        """Boolean mask for pixel coordinates (u right, v down)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.mode == "bottom":
            return v >= (1.0 - self.fraction) * height
        if self.mode == "top":
            return v < self.fraction * height
        return _point_in_polygon(u / width, v / height, self.vertices)

    def masked_rows(self, height: int) -> range:
        """Fully masked row range for the fractional modes."""
        if self.mode == "bottom":
            first = math.ceil((1.0 - self.fraction) * height - 0.5)
            return range(min(max(first, 0), height), height)
        if self.mode == "top":
            stop = math.ceil(self.fraction * height - 0.5)
            return range(0, min(max(stop, 0), height))
        raise ValueError("masked_rows is defined for fractional modes only")

    def masked_pixel_count(self, width: int, height: int) -> int:
        uu, vv = np.meshgrid(
            np.arange(width, dtype=float) + 0.5, np.arange(height, dtype=float) + 0.5
        )
        return int(np.count_nonzero(self.masked(uu, vv, width, height)))


def build_mask(
    mode: str,
    fraction: float | None = None,
    vertices: list[tuple[float, float]] | None = None,
) -> MaskSpec:
    if mode in ("bottom", "top"):
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ValueError(f"mask fraction must be in [0, 1], got {fraction!r}")
        return MaskSpec(mode, float(fraction))
    if mode == "polygon":
        if vertices is None or len(vertices) < 3:
            raise ValueError("polygon mask needs at least 3 vertices")
        verts = tuple((float(u), float(v)) for u, v in vertices)
        for u, v in verts:
            if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
                raise ValueError(f"polygon vertex ({u:g}, {v:g}) outside [0, 1]^2")
        if _self_intersects(verts):
            raise ValueError("polygon is self-intersecting")
        return MaskSpec("polygon", 0.0, verts)
    raise ValueError(f"unknown mask mode {mode!r}")


def _point_in_polygon(u, v, verts):
    """Even-odd rule, vectorized over points."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        (x1, y1), (x2, y2) = verts[i], verts[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < xint)
    return inside


def _segments_cross(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _self_intersects(verts):
    n = len(verts)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # shared endpoint
            if _segments_cross(verts[i], verts[(i + 1) % n], verts[j], verts[(j + 1) % n]):
                return True
    return False


def mask_points(mask: MaskSpec, pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Indices of points whose pixel coordinates survive the mask.

    ``pixels`` is (N, 2) with columns (u, v).  Order is preserved.
    """
    pixels = np.asarray(pixels, dtype=float)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be (N, 2)")
    keep = ~mask.masked(pixels[:, 0], pixels[:, 1], width, height)
    return np.flatnonzero(keep)


# ---------------------------------------------------------------------------
# downsampling


@dataclass(frozen=True)
class DownsampleRecipe:
    scale_x: float
    scale_y: float
    fps_ratio: Fraction
    kept_pattern: tuple[int, ...]  # frame offsets kept within each cycle of len(denominator)
    low_fps_warning: bool

    @property
    def cycle(self) -> int:
        return self.fps_ratio.denominator

    def kept_frames(self, num_frames: int) -> np.ndarray:
        base = np.arange(0, num_frames, self.cycle)
        offs = np.array(self.kept_pattern, dtype=int)
        idx = (base[:, None] + offs[None, :]).ravel()
        return idx[idx < num_frames]


def downsample_recipe(
    meta: VideoMeta, target_width: int, target_height: int, target_fps: float
) -> DownsampleRecipe:
    """Spatial scale factors plus a frame-selection stride pattern.

    The frame pattern realizes the reduced rational closest to
    target_fps / source_fps, keeping frame i of each cycle when the
    accumulated ratio crosses an integer.  Dropping below 12 fps is
    flagged: tracking quality degrades sharply there.
    """
    if target_width > meta.width or target_height > meta.height:
        raise ValueError(
            f"upsampling request: {target_width}x{target_height} exceeds "
            f"{meta.width}x{meta.height}"
        )
    if target_fps > meta.fps:
        raise ValueError(f"upsampling request: {target_fps:g} fps exceeds {meta.fps:g}")
    if target_width < 1 or target_height < 1 or target_fps <= 0:
        raise ValueError("targets must be positive")
    ratio = Fraction(target_fps / meta.fps).limit_denominator(1000)
    if ratio > 1:
        ratio = Fraction(1, 1)
    num, den = ratio.numerator, ratio.denominator
    kept = tuple(
        i for i in range(den) if ((i + 1) * num) // den > (i * num) // den
    )
    return DownsampleRecipe(
        scale_x=target_width / meta.width,
        scale_y=target_height / meta.height,
        fps_ratio=ratio,
        kept_pattern=kept,
        low_fps_warning=target_fps < 12.0,
    )
