"""voxtex: volumetric human reconstruction and orthographic texture synthesis.

Two trainable stages (a multi-view occupancy network and a conditional VAE
for orthographic texture images) plus the geometry plumbing around them:
voxelization, virtual RGBD sensing, isosurface extraction, orthographic
projection, and texture back-projection.  Everything runs at a configurable
desk scale on a CPU.
"""

from .grids import VoxelGrid, cross_entropy_loss, iou, threshold, save_voxels, load_voxels
from .meshes import TriMesh, normalize_unit_cube, save_obj, load_obj
from .voxelize import voxelize, is_watertight, NonWatertightMeshError
from .surface import extract_surface

__all__ = [
    "VoxelGrid", "TriMesh",
    "cross_entropy_loss", "iou", "threshold",
    "save_voxels", "load_voxels", "save_obj", "load_obj",
    "voxelize", "is_watertight", "NonWatertightMeshError",
    "normalize_unit_cube", "extract_surface",
]
