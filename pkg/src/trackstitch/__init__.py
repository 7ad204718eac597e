"""Trajectory stitching for chunked monocular reconstructions of race circuits."""

__version__ = "0.1.0"
