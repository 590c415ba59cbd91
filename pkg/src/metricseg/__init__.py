"""Instance segmentation of point clouds by learned metric embeddings and HDBSCAN."""

from metricseg.errors import CheckpointError, ValidationError
from metricseg.geometry import PointCloud, VoxelGrid, devoxelize, voxel_key, voxelize

__all__ = [
    "CheckpointError",
    "PointCloud",
    "ValidationError",
    "VoxelGrid",
    "devoxelize",
    "voxel_key",
    "voxelize",
]
__version__ = "0.1.0"
