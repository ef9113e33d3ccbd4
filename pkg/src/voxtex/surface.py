"""Isosurface extraction: marching cubes at a threshold, then Laplacian
smoothing.  This is the voxels-to-mesh glue for the whole pipeline."""

from __future__ import annotations

import numpy as np
from skimage import measure

from .grids import VoxelGrid
from .meshes import TriMesh, adjacency_lists, empty_mesh

SMOOTH_LAMBDA = 0.5


def laplacian_smooth(mesh: TriMesh, iterations: int = 5,
                     lam: float = SMOOTH_LAMBDA) -> TriMesh:
    """Uniform-weight Laplacian smoothing: v += lam * (mean(neighbors) - v)."""
    if mesh.is_empty or iterations <= 0:
        return mesh
    nbrs = adjacency_lists(mesh)
    counts = np.array([max(len(n), 1) for n in nbrs], dtype=np.float64)
    idx = np.concatenate([n for n in nbrs if len(n)]) if any(len(n) for n in nbrs) \
        else np.zeros(0, dtype=np.int64)
    owner = np.concatenate([np.full(len(n), i) for i, n in enumerate(nbrs) if len(n)]) \
        if len(idx) else np.zeros(0, dtype=np.int64)
    verts = mesh.vertices.copy()
    for _ in range(iterations):
        sums = np.zeros_like(verts)
        np.add.at(sums, owner, verts[idx])
        verts += lam * (sums / counts[:, None] - verts)
    return TriMesh(verts, mesh.triangles, mesh.vertex_colors)


def extract_surface(grid: VoxelGrid, t: float = 0.5,
                    smooth_iters: int = 5) -> TriMesh:
    """Marching cubes over the grid at isolevel t, Laplacian-smoothed.

    Returns an empty mesh when the grid has no isosurface (uniformly above
    or below t); callers treat mesh.is_empty as the flag.  Vertex positions
    land in [0,1]^3.  The surface is closed whenever the occupied region
    stays off the grid boundary.
    """
    vals = grid.values
    # zero padding supplies the below-level side, so only a grid with no
    # cell above the level has no isosurface at all
    if not (vals > t).any():
        return empty_mesh()
    r = grid.resolution
    padded = np.zeros((r + 2, r + 2, r + 2), dtype=np.float64)
    padded[1:-1, 1:-1, 1:-1] = vals
    verts, faces, _, _ = measure.marching_cubes(padded, level=t)
    # padded index i maps to cell i-1, whose center sits at (i-0.5)/R
    verts = (verts - 0.5) / r
    tris = faces.astype(np.int64)
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    mesh = TriMesh(verts, tris[ok])
    mesh = laplacian_smooth(mesh, smooth_iters)
    return TriMesh(np.clip(mesh.vertices, 0.0, 1.0), mesh.triangles)
