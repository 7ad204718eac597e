"""Shared exception types.

The CLI maps these onto exit codes: data/format problems exit 2,
numerical failures exit 3 (usage errors are handled by argparse and
exit 1).
"""

from __future__ import annotations


class TrackstitchError(Exception):
    """Base class for package errors."""


class DataFormatError(TrackstitchError):
    """A file on disk is malformed or inconsistent.

    ``path`` and ``line`` (1-based, or None) locate the offending input.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}: " if line is None else f"{path}:{line}: "
        super().__init__(where + message)


class ManifestError(DataFormatError):
    pass


class TrajectoryFormatError(DataFormatError):
    pass


class PointCloudFormatError(DataFormatError):
    pass


class NumericalError(TrackstitchError):
    """A computation failed for numerical reasons (not bad input files)."""


class DegenerateAlignmentError(NumericalError):
    """Point configuration cannot determine an alignment."""


class OptimizerDiverged(NumericalError):
    """Non-finite cost or state inside the pose-graph optimizer."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
