"""Branched rough paths and a priori bounds for damped rough differential equations."""

__version__ = "0.1.0"
