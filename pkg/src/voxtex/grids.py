"""Occupancy grids: the cubic voxel data type, its loss/metric formulas, and file I/O.

A grid covers the unit cube [0,1]^3, cell-centered: cell (x, y, z) has its
center at ((x+.5)/R, (y+.5)/R, (z+.5)/R).  Raster order (used by the file
format and anywhere cells are enumerated flat) is x fastest:
index = x + R*(y + R*z).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

VOXEL_MAGIC = b"VOXL"
VOXEL_VERSION = 1

# Clamp applied to predictions inside the cross entropy so log() stays finite.
CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic occupancy field; values[x, y, z] in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[0] != v.shape[2]:
            raise ValueError(f"voxel grid must be cubic, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError(f"resolution must be >= 2, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("voxel values must be finite")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError(
                f"voxel values must lie in [0, 1], got range "
                f"[{v.min():.6g}, {v.max():.6g}]"
            )
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def is_binary(self) -> bool:
        v = self.values
        return bool(np.all((v == 0.0) | (v == 1.0)))

    def flat(self) -> np.ndarray:
        """Values in raster order: index = x + R*(y + R*z)."""
        return self.values.ravel(order="F")


def cell_centers(resolution: int) -> np.ndarray:
    """(R, R, R, 3) array of cell-center coordinates in the unit cube."""
    c = (np.arange(resolution) + 0.5) / resolution
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def threshold(grid: VoxelGrid, t: float) -> VoxelGrid:
    """Binarize: value -> 1 iff value > t (strict)."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return VoxelGrid((grid.values > t).astype(np.float64))


def _check_same_resolution(a: VoxelGrid, b: VoxelGrid):
    if a.resolution != b.resolution:
        raise ValueError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}"
        )


def cross_entropy_loss(pred: VoxelGrid, target: VoxelGrid) -> float:
    """Voxel-wise cross entropy, summed over all cells.

    Predictions are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before the log.
    The target grid must be binary.  This is the numpy reference; the
    differentiable twin used during training lives in voxtex.nn.layers and
    matches it cell for cell.
    """
    _check_same_resolution(pred, target)
    if not target.is_binary():
        raise ValueError("cross entropy target must be a binary grid")
    p = np.clip(pred.values.astype(np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = target.values.astype(np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def iou(pred: VoxelGrid, target: VoxelGrid, t: float = 0.5,
        literal_eq3: bool = False) -> float:
    """Intersection over union of the thresholded grids.

    Standard mode divides by the union |P| + |Y| - |P & Y|.  The literal
    variant divides by |P| + |Y| (the sum of cardinalities), kept for
    fidelity with the printed formula; it yields 0.5 on identical grids.
    Both grids empty returns 1.0 in standard mode.
    """
    _check_same_resolution(pred, target)
    p = pred.values > t
    y = target.values > t
    inter = float(np.count_nonzero(p & y))
    p_count = float(np.count_nonzero(p))
    y_count = float(np.count_nonzero(y))
    if literal_eq3:
        denom = p_count + y_count
        return inter / denom if denom > 0 else 0.0
    union = p_count + y_count - inter
    if union == 0:
        return 1.0
    return inter / union


def save_voxels(grid: VoxelGrid, path) -> None:
    """Write the VOXL container: magic, version byte, u32 LE resolution,
    then R^3 float32 LE values in raster order."""
    r = grid.resolution
    payload = grid.values.astype("<f4").ravel(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(VOXEL_MAGIC)
        f.write(struct.pack("B", VOXEL_VERSION))
        f.write(struct.pack("<I", r))
        f.write(payload)


def load_voxels(path) -> VoxelGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 9 or blob[:4] != VOXEL_MAGIC:
        raise ValueError(f"{path}: not a VOXL file")
    version = blob[4]
    if version != VOXEL_VERSION:
        raise ValueError(f"{path}: unsupported VOXL version {version}")
    (r,) = struct.unpack("<I", blob[5:9])
    expected = 9 + 4 * r ** 3
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated or oversized VOXL payload "
            f"({len(blob)} bytes, expected {expected})"
        )
    vals = np.frombuffer(blob[9:], dtype="<f4").astype(np.float64)
    return VoxelGrid(vals.reshape((r, r, r), order="F"))
