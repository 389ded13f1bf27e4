"""Sparse spectral methods on disk-slices, half-disks and trapeziums."""
