"""Appearance-preserving 3D convolution for video re-identification."""
