"""Sparse voxel convolution with spatial group partitioning for scene completion."""

__version__ = "0.1.0"
