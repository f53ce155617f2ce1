"""Recurrent-convolutional odometry from 2D laser scans."""

__version__ = "0.1.0"
