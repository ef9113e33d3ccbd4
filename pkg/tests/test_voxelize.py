"""Voxelization against analytic and per-cell-center oracles."""

import numpy as np
import pytest

from voxtex.grids import cell_centers
from voxtex.meshes import TriMesh, box_mesh, icosphere
from voxtex.voxelize import NonWatertightMeshError, is_watertight, voxelize


class TestSolidFill:
    def test_full_domain_box_fills_everything(self):
        # a box normalizes to [0.05, 0.95]^3; every cell center at R=8 is inside
        m = box_mesh([2, 2, 2], [4, 4, 4])
        grid, _ = voxelize(m, 8, fill="solid")
        assert grid.values.sum() == 8 ** 3

    def test_sphere_volume_within_two_percent(self):
        m = icosphere(subdivisions=4, radius=0.45, center=(0.5, 0.5, 0.5))
        grid, _ = voxelize(m, 64, fill="solid")
        frac = grid.values.mean()
        analytic = 4.0 / 3.0 * np.pi * 0.45 ** 3
        assert abs(frac - analytic) / analytic < 0.02

    def test_sphere_matches_cell_center_oracle(self):
        # the independent oracle: a cell is filled iff its center is inside
        # the analytic sphere the mesh approximates
        m = icosphere(subdivisions=4, radius=0.45, center=(0.5, 0.5, 0.5))
        grid, _ = voxelize(m, 32, fill="solid")
        centers = cell_centers(32)
        inside = np.linalg.norm(centers - 0.5, axis=-1) < 0.45
        disagree = np.count_nonzero(grid.values.astype(bool) ^ inside)
        # faceting of the icosphere may flip cells near the surface only
        assert disagree / inside.sum() < 0.02

    def test_open_surface_raises(self):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        with pytest.raises(NonWatertightMeshError, match="non-watertight"):
            voxelize(tri, 16, fill="solid")

    def test_returns_normalization_transform(self):
        m = box_mesh([10, 10, 10], [12, 12, 12])
        grid, tf = voxelize(m, 8)
        # cube center maps to the unit-cube center
        np.testing.assert_allclose(tf.apply(np.array([11.0, 11.0, 11.0])), 0.5)

    def test_empty_mesh_rejected(self):
        m = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError, match="empty"):
            voxelize(m, 8)

    def test_result_is_binary(self):
        m = icosphere(2, radius=1.0)
        grid, _ = voxelize(m, 16)
        assert grid.is_binary()


class TestSurfaceFill:
    def test_surface_covers_inside_outside_transitions(self):
        # wherever solid occupancy flips between 6-neighbors, the surface
        # passes between the two cell centers, so the surface fill must mark
        # at least one of the pair
        m = icosphere(3, radius=0.45, center=(0.5, 0.5, 0.5))
        surf, _ = voxelize(m, 24, fill="surface")
        solid, _ = voxelize(m, 24, fill="solid")
        occ = solid.values.astype(bool)
        marked = surf.values.astype(bool)
        for ax in range(3):
            a = np.swapaxes(occ, 0, ax)
            s = np.swapaxes(marked, 0, ax)
            flips = a[:-1] ^ a[1:]
            covered = s[:-1] | s[1:]
            assert covered[flips].all()

    def test_thin_triangle_marks_cells(self):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        grid, _ = voxelize(tri, 8, fill="surface")
        assert grid.values.sum() > 0

    def test_unknown_fill_mode(self):
        with pytest.raises(ValueError, match="fill"):
            voxelize(icosphere(1), 8, fill="banana")


class TestWatertight:
    def test_closed_meshes_pass(self):
        assert is_watertight(icosphere(2))
        assert is_watertight(box_mesh([0, 0, 0], [1, 1, 1]))

    def test_open_mesh_fails(self):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert not is_watertight(tri)

    def test_box_with_missing_face_fails(self):
        m = box_mesh([0, 0, 0], [1, 1, 1])
        holed = TriMesh(m.vertices, m.triangles[2:])  # drop the z=lo cap
        assert not is_watertight(holed)
