"""Global track cloud assembly.

Chunk reconstructions live in their own arbitrary frames.  Once stitching
(and optionally pose refinement) has produced a gauge per chunk, every
per-frame cloud can be carried into the shared world frame and merged into
one cloud of the whole track.  Merging deduplicates by voxel so the output
stays bounded no matter how much the chunks overlap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .chunkio import ChunkReconstruction, PointCloudData
from .geometry import Sim3Transform

DEFAULT_VOXEL = 0.25  # meters


@dataclass
class FusedCloud:
    """Deduplicated world-frame track cloud.

    ``confidence`` and ``chunk_ids`` run parallel to ``points``.  After
    dedup at a positive voxel size no two points share a voxel; ``voxel``
    records the size used.
    """

    points: np.ndarray  # (N, 3) world coordinates, meters
    confidence: np.ndarray  # (N,) in [0, 1]
    chunk_ids: np.ndarray  # (N,) source chunk of each point
    voxel: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        self.chunk_ids = np.asarray(self.chunk_ids, dtype=np.int64).reshape(-1)
        n = self.points.shape[0]
        if self.confidence.shape[0] != n or self.chunk_ids.shape[0] != n:
            raise ValueError("points, confidence and chunk_ids lengths disagree")
        if n and (self.confidence.min() < 0.0 or self.confidence.max() > 1.0):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return self.points.shape[0]


def to_global(
    chunk: ChunkReconstruction,
    gauge: Sim3Transform,
    refined: Mapping[int, Sim3Transform] | None = None,
) -> PointCloudData:
    """Carry one chunk's points into the world frame.

    Without ``refined``, every point is mapped by the chunk gauge.  With
    it, frame ``f``'s points are mapped by the frame's refined world pose
    composed with its inverted chunk-local pose, so the points ride along
    with whatever correction refinement applied to that frame.  Frames
    absent from ``refined`` fall back to the gauge, with a warning.
    """
    pts, conf = [], []
    missing = 0
    for rec in chunk.frames:
        carrier = gauge
        if refined is not None:
            pose = refined.get(rec.frame)
            if pose is None:
                missing += 1
            else:
                carrier = pose.compose(Sim3Transform.from_pose(rec.pose).inverse())
        pts.append(carrier.apply(rec.points))
        conf.append(rec.confidence)
    if missing:
        warnings.warn(
            f"chunk {chunk.chunk_id}: {missing} frames lack refined poses, using the gauge",
            stacklevel=2,
        )
    return PointCloudData(points=np.concatenate(pts), confidence=np.concatenate(conf))


def fuse(
    sets: Sequence[PointCloudData | FusedCloud],
    voxel: float = DEFAULT_VOXEL,
    min_confidence: float = 0.0,
    chunk_ids: Sequence | None = None,
) -> FusedCloud:
    """Merge world-frame point sets into one deduplicated cloud.

    Points with confidence strictly below ``min_confidence`` are dropped.
    The rest are bucketed into axis-aligned cubes of side ``voxel``
    anchored at the origin, and each occupied cube keeps its single best
    point: highest confidence, ties broken by lowest chunk id and then by
    feed order.  The output is sorted lexicographically by voxel index.
    ``voxel=0`` disables dedup and keeps the filtered feed order.

    ``chunk_ids`` labels the sets (one id per set, defaulting to the set's
    position) and also accepts a per-point id array for a set, so a
    previously fused cloud can be fed back without losing provenance.
    """
    if voxel < 0.0:
        raise ValueError("voxel size must be non-negative")
    if chunk_ids is None:
        chunk_ids = range(len(sets))
    ids = list(chunk_ids)
    if len(ids) != len(sets):
        raise ValueError("chunk_ids must provide one entry per set")

    pts_l, conf_l, cid_l = [], [], []
    for s, i in zip(sets, ids):
        p = np.asarray(s.points, dtype=float).reshape(-1, 3)
        c = s.confidence
        c = np.ones(p.shape[0]) if c is None else np.asarray(c, dtype=float).reshape(-1)
        i = np.asarray(i, dtype=np.int64)
        i = np.full(p.shape[0], i) if i.ndim == 0 else i.reshape(-1)
        if c.shape[0] != p.shape[0] or i.shape[0] != p.shape[0]:
            raise ValueError("per-point array lengths disagree within a set")
        pts_l.append(p)
        conf_l.append(c)
        cid_l.append(i)
    if pts_l:
        pts, conf, cid = np.concatenate(pts_l), np.concatenate(conf_l), np.concatenate(cid_l)
    else:
        pts, conf, cid = np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)

    keep = conf >= min_confidence
    pts, conf, cid = pts[keep], conf[keep], cid[keep]
    if voxel == 0.0 or pts.shape[0] == 0:
        return FusedCloud(pts, conf, cid, voxel)

    idx = np.floor(pts / voxel).astype(np.int64)
    # Primary keys last: voxel triple, then quality and the tie-breakers.
    order = np.lexsort(
        (np.arange(pts.shape[0]), cid, -conf, idx[:, 2], idx[:, 1], idx[:, 0])
    )
    idx = idx[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = np.any(idx[1:] != idx[:-1], axis=1)
    win = order[first]
    return FusedCloud(pts[win], conf[win], cid[win], voxel)
