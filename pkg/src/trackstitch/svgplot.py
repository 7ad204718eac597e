"""Deterministic SVG figures: top-down trajectory and cloud plots.

SVG because the output is text.  Identical inputs give identical bytes,
so figures diff cleanly and golden-file tests need no raster tolerance
machinery.  Everything is projected onto the ground plane with equal
axis scaling.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .chunkio import Trajectory
from .evaluation import endpoint_gap

_PALETTE = ("#1f6fb4", "#c23b22", "#2a9d5c", "#8656b8", "#b8860b", "#2aa0a0")
_GT_STROKE = "#808080"
_MARGIN = 40.0  # px
_MAX_CLOUD_DOTS = 4000


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Mapper:
    """World xy to pixel coordinates, equal scale, y flipped for SVG."""

    def __init__(self, xy: np.ndarray, width: float, height: float):
        lo = xy.min(axis=0)
        hi = xy.max(axis=0)
        span = np.maximum(hi - lo, 1e-6)
        avail = np.array([width - 2.0 * _MARGIN, height - 2.0 * _MARGIN])
        self.scale = float(np.min(avail / span))
        pad = 0.5 * (avail - span * self.scale)
        self.x0 = float(lo[0]) - (_MARGIN + pad[0]) / self.scale
        self.y1 = float(hi[1]) + (_MARGIN + pad[1]) / self.scale
        self.height = height

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        out = np.empty_like(xy, dtype=float)
        out[:, 0] = (xy[:, 0] - self.x0) * self.scale
        out[:, 1] = (self.y1 - xy[:, 1]) * self.scale
        return out


def _path(px: np.ndarray, stroke: str, extra: str = "") -> str:
    coords = " L ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in px)
    return f'<path d="M {coords}" fill="none" stroke="{stroke}" stroke-width="1.5"{extra}/>'


def render_plot(
    trajectories: Sequence[tuple[str, Trajectory]],
    ground_truth: Trajectory | None = None,
    cloud: np.ndarray | None = None,
    width: int = 800,
    height: int = 600,
) -> str:
    """Render labeled trajectories (plus optional reference and cloud).

    Draws each estimate in its own stroke, the reference dashed gray, one
    start marker per path, and a legend that annotates every trajectory
    with its endpoint gap.  Output is byte-deterministic in the inputs.
    """
    if not trajectories:
        raise ValueError("at least one trajectory required")
    rows = [(label, traj, False) for label, traj in trajectories]
    if ground_truth is not None:
        rows.append(("ground truth", ground_truth, True))
    for label, traj, _ in rows:
        if len(traj) == 0:
            raise ValueError(f"empty trajectory {label!r}")

    stacks = [traj.positions()[:, :2] for _, traj, _ in rows]
    if cloud is not None and len(cloud):
        step = max(1, math.ceil(len(cloud) / _MAX_CLOUD_DOTS))
        dots = np.asarray(cloud, dtype=float)[::step, :2]
        stacks.append(dots)
    else:
        dots = None
    to_px = _Mapper(np.concatenate(stacks), float(width), float(height))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if dots is not None:
        px = to_px(dots)
        circles = "".join(
            f'<circle cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="0.8"/>' for p in px
        )
        parts.append(f'<g fill="#c8c8c8" fill-opacity="0.55">{circles}</g>')

    legend = []
    for i, (label, traj, is_gt) in enumerate(rows):
        stroke = _GT_STROKE if is_gt else _PALETTE[i % len(_PALETTE)]
        dash = ' stroke-dasharray="6 4"' if is_gt else ""
        px = to_px(traj.positions()[:, :2])
        parts.append(_path(px, stroke, dash))
        parts.append(
            f'<circle cx="{_fmt(px[0, 0])}" cy="{_fmt(px[0, 1])}" r="4" '
            f'fill="{stroke}" stroke="#ffffff" stroke-width="1"/>'
        )
        legend.append((f"{label} (gap {endpoint_gap(traj):.2f} m)", stroke, dash))

    box_w = 30 + 7.5 * max(len(text) for text, _, _ in legend)
    box_h = 10 + 18 * len(legend)
    parts.append(
        f'<rect x="{_fmt(_MARGIN / 2)}" y="{_fmt(_MARGIN / 2)}" width="{_fmt(box_w)}" '
        f'height="{_fmt(box_h)}" fill="#ffffff" fill-opacity="0.85" stroke="#404040"/>'
    )
    for i, (text, stroke, dash) in enumerate(legend):
        y = _MARGIN / 2 + 18 * (i + 1) - 4
        parts.append(
            f'<line x1="{_fmt(_MARGIN / 2 + 6)}" y1="{_fmt(y - 4)}" x2="{_fmt(_MARGIN / 2 + 24)}" '
            f'y2="{_fmt(y - 4)}" stroke="{stroke}" stroke-width="1.5"{dash}/>'
        )
        parts.append(
            f'<text x="{_fmt(_MARGIN / 2 + 28)}" y="{_fmt(y)}" font-family="monospace" '
            f'font-size="12" fill="#202020">{_escape(text)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
