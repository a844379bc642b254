"""Learned registration-uncertainty covariances for bathymetric graph SLAM."""

__version__ = "0.1.0"
