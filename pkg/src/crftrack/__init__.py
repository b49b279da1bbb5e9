"""Tracklet association with an unrolled CRF energy minimizer."""

__version__ = "0.1.0"
