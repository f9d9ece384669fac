"""Robust sliding-window visual-inertial odometry with adaptive truncated
least squares, a bias consistency check and stable state recovery."""

__version__ = "0.1.0"
