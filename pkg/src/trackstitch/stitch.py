"""Chain per-chunk reconstructions into one frame via seam alignment.

Consecutive chunks share their boundary frames, and those frames carry
the same physical point samples in both chunks, so the seam transform
between two adjacent chunk gauges can be estimated from point
correspondences alone.  Three estimators are available:

``umeyama``
    Full similarity (scale, rotation, translation) least-squares fit
    over all shared-frame point pairs.
``unit``
    Rigid fit only; scales are trusted to be consistent already.
``depth``
    Scale from the median depth ratio of pixel-identical observations,
    then a rigid fit of the rescaled points.

Stitching anchors the first chunk (its gauge becomes the stitched
frame) and composes seam transforms down the chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chunkio import ChunkReconstruction, Trajectory
from .errors import DegenerateAlignmentError
from .geometry import Pose, Rotation, Sim3Transform

_RANK_RTOL = 1e-9


def umeyama(
    src: np.ndarray,
    dst: np.ndarray,
    with_scale: bool = True,
    with_rotation: bool = True,
) -> Sim3Transform:
    """Least-squares similarity transform mapping ``src`` onto ``dst``.

    Raises DegenerateAlignmentError when the source points do not span
    at least a plane (fewer than 3 points, or all collinear).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (N, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateAlignmentError(f"rank-deficient alignment: {n} correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = float((cs**2).sum() / n)
    if var_s == 0.0:
        raise DegenerateAlignmentError("rank-deficient alignment: source points coincide")

    if not with_rotation:
        if with_scale:
            var_d = float((cd**2).sum() / n)
            scale = float(np.sqrt(var_d / var_s))
            if scale == 0.0:
                raise DegenerateAlignmentError("rank-deficient alignment: target points coincide")
        else:
            scale = 1.0
        return Sim3Transform(scale, Rotation.identity(), mu_d - scale * mu_s)

    cov = cd.T @ cs / n
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= _RANK_RTOL * D[0]:
        raise DegenerateAlignmentError("rank-deficient alignment: points are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    if scale <= 0.0:
        raise DegenerateAlignmentError("rank-deficient alignment: non-positive scale")
    t = mu_d - scale * (R @ mu_s)
    return Sim3Transform(scale, Rotation.from_matrix(R), t)


@dataclass
class SeamDiagnostics:
    chunk_a: int
    chunk_b: int
    shared_frames: list[int]
    num_matches: int
    scale: float
    point_rms: float


def _shared_frame_pairs(a: ChunkReconstruction, b: ChunkReconstruction):
    fa, fb = a.frame_map(), b.frame_map()
    shared = sorted(set(fa) & set(fb))
    if not shared:
        raise ValueError(f"chunks {a.chunk_id} and {b.chunk_id} share no frames")
    return shared, fa, fb


def _pixel_matches(pa: np.ndarray, pb: np.ndarray):
    """Indices of rows with bit-equal pixel coordinates in both arrays."""
    seen = {row.tobytes(): i for i, row in enumerate(np.asarray(pa))}
    ia, ib = [], []
    for j, row in enumerate(np.asarray(pb)):
        i = seen.get(row.tobytes())
        if i is not None:
            ia.append(i)
            ib.append(j)
    return np.array(ia, dtype=int), np.array(ib, dtype=int)


def align_overlap(
    a: ChunkReconstruction, b: ChunkReconstruction, mode: str = "umeyama"
) -> tuple[Sim3Transform, SeamDiagnostics]:
    """Transform taking chunk ``b`` local coordinates into chunk ``a``'s."""
    if mode not in ("umeyama", "unit", "depth"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    shared, fa, fb = _shared_frame_pairs(a, b)

    src_parts, dst_parts = [], []
    ratios = []
    for f in shared:
        ra, rb = fa[f], fb[f]
        if mode == "depth":
            ia, ib = _pixel_matches(ra.pixels, rb.pixels)
            if ia.size == 0:
                continue
            pa, pb = ra.points[ia], rb.points[ib]
            za = ra.pose.inverse().apply(pa)[:, 2]
            zb = rb.pose.inverse().apply(pb)[:, 2]
            good = (za > 0) & (zb > 0)
            ratios.append(za[good] / zb[good])
            dst_parts.append(pa[good])
            src_parts.append(pb[good])
        else:
            n = min(ra.points.shape[0], rb.points.shape[0])
            dst_parts.append(ra.points[:n])
            src_parts.append(rb.points[:n])
    src = np.concatenate(src_parts) if src_parts else np.zeros((0, 3))
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros((0, 3))
    if src.shape[0] < 3:
        raise DegenerateAlignmentError(
            f"rank-deficient alignment: {src.shape[0]} seam correspondences "
            f"between chunks {a.chunk_id} and {b.chunk_id}"
        )

    if mode == "umeyama":
        transform = umeyama(src, dst, with_scale=True)
    elif mode == "unit":
        transform = umeyama(src, dst, with_scale=False)
    else:
        scale = float(np.median(np.concatenate(ratios)))
        if scale <= 0.0:
            raise DegenerateAlignmentError("rank-deficient alignment: non-positive depth ratio")
        rigid = umeyama(scale * src, dst, with_scale=False)
        transform = Sim3Transform(scale * rigid.scale, rigid.rotation, rigid.translation)

    res = transform.apply(src) - dst
    rms = float(np.sqrt((res**2).sum() / max(1, res.shape[0])))
    diag = SeamDiagnostics(a.chunk_id, b.chunk_id, shared, src.shape[0], transform.scale, rms)
    return transform, diag


@dataclass
class StitchResult:
    gauges: list[Sim3Transform]  # chunk-local -> stitched frame, per chunk
    trajectory: Trajectory  # deduplicated: shared frames keep the earlier chunk's pose
    seams: list[SeamDiagnostics]


def stitched_trajectory(
    chunks: list[ChunkReconstruction], gauges: list[Sim3Transform]
) -> Trajectory:
    """Per-frame camera poses under the given chunk gauges, deduplicated."""
    if len(chunks) != len(gauges):
        raise ValueError("one gauge per chunk required")
    by_frame: dict[int, tuple[float, Pose]] = {}
    for chunk, gauge in zip(chunks, gauges):
        for rec in chunk.frames:
            if rec.frame not in by_frame:
                by_frame[rec.frame] = (rec.timestamp, gauge.transform_pose(rec.pose))
    frames = sorted(by_frame)
    ts = np.array([by_frame[f][0] for f in frames])
    return Trajectory(ts, [by_frame[f][1] for f in frames])


def stitch_chunks(chunks: list[ChunkReconstruction], mode: str = "umeyama") -> StitchResult:
    """Chain all chunks into the first one's frame via seam alignment."""
    if not chunks:
        raise ValueError("no chunks to stitch")
    gauges = [Sim3Transform.identity()]
    seams = []
    for a, b in zip(chunks, chunks[1:]):
        delta, diag = align_overlap(a, b, mode=mode)
        gauges.append(gauges[-1].compose(delta))
        seams.append(diag)
    return StitchResult(gauges, stitched_trajectory(chunks, gauges), seams)
