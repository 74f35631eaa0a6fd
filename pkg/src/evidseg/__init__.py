"""Evidential 3D PET/CT segmentation with per-voxel uncertainty maps."""

__version__ = "0.1.0"
