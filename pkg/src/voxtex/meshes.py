"""Indexed triangle meshes, OBJ round trip, and the shared unit-cube normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fraction of the unit cube left free on each side when a mesh is normalized.
NORMALIZE_PADDING = 0.05


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with optional per-vertex RGB colors in [0,1]^3."""

    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    vertex_colors: np.ndarray | None = None  # (V, 3) float64 or None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if t.size:
            degenerate = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if degenerate.any():
                raise ValueError(f"{degenerate.sum()} degenerate triangles (repeated index)")
        c = self.vertex_colors
        if c is not None:
            c = np.asarray(c, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError(f"{len(c)} colors for {len(v)} vertices")
            if c.size and (c.min() < 0.0 or c.max() > 1.0):
                raise ValueError("vertex colors must lie in [0, 1]")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_colors", c)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.triangles) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_colors(self, colors: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, colors)


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


@dataclass(frozen=True)
class NormalizationTransform:
    """Uniform scale + translation: p -> p * scale + translate."""

    scale: float
    translate: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translate

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translate) / self.scale


def normalize_unit_cube(mesh: TriMesh, padding: float = NORMALIZE_PADDING
                        ) -> tuple[TriMesh, NormalizationTransform]:
    """Scale/translate the mesh into [0,1]^3 with the given padding.

    Uniform scale (largest bounding-box extent governs); the box center maps
    to the cube center.  Every module that talks about "the normalized frame"
    means this transform.
    """
    if mesh.is_empty:
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("mesh has zero extent")
    scale = (1.0 - 2.0 * padding) / extent
    center = (lo + hi) / 2.0
    translate = 0.5 - center * scale
    tf = NormalizationTransform(scale, translate)
    return TriMesh(tf.apply(mesh.vertices), mesh.triangles, mesh.vertex_colors), tf


def triangle_normals(mesh: TriMesh, normalized: bool = True) -> np.ndarray:
    v = mesh.vertices
    t = mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    if normalized:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(lens, 1e-30)
    return n


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (cross products left unnormalized)."""
    n = np.zeros_like(mesh.vertices)
    tn = triangle_normals(mesh, normalized=False)
    for k in range(3):
        np.add.at(n, mesh.triangles[:, k], tn)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lens, 1e-30)


def surface_area(mesh: TriMesh) -> float:
    tn = triangle_normals(mesh, normalized=False)
    return float(0.5 * np.linalg.norm(tn, axis=1).sum())


def edge_counts(mesh: TriMesh) -> dict[tuple[int, int], int]:
    """Undirected edge -> number of incident triangles."""
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_closed_manifold(mesh: TriMesh) -> bool:
    """Every undirected edge shared by exactly two triangles, consistently
    oriented (each directed edge used exactly once)."""
    if mesh.is_empty:
        return False
    directed: set[tuple[int, int]] = set()
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b))
            if key in directed:
                return False
            directed.add(key)
    for a, b in directed:
        if (b, a) not in directed:
            return False
    return True


def euler_characteristic(mesh: TriMesh) -> int:
    v = len(mesh.vertices)
    f = len(mesh.triangles)
    e = len(edge_counts(mesh))
    return v - e + f


def adjacency_lists(mesh: TriMesh) -> list[np.ndarray]:
    """Per-vertex arrays of neighboring vertex indices."""
    nbrs: list[set[int]] = [set() for _ in range(len(mesh.vertices))]
    for tri in mesh.triangles:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return [np.fromiter(sorted(s), dtype=np.int64) for s in nbrs]


# ---------------------------------------------------------------------------
# primitive generators (used by tests, demos and the dataset generator)

def box_mesh(lo, hi) -> TriMesh:
    """Axis-aligned box as 12 triangles, outward oriented."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]],
                        [hi[0], lo[1], lo[2]],
                        [lo[0], hi[1], lo[2]],
                        [hi[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]],
                        [hi[0], lo[1], hi[2]],
                        [lo[0], hi[1], hi[2]],
                        [hi[0], hi[1], hi[2]]])
    tris = np.array([
        [0, 2, 1], [1, 2, 3],  # z = lo
        [4, 5, 6], [5, 7, 6],  # z = hi
        [0, 1, 4], [1, 5, 4],  # y = lo
        [2, 6, 3], [3, 6, 7],  # y = hi
        [0, 4, 2], [2, 4, 6],  # x = lo
        [1, 3, 5], [3, 7, 5],  # x = hi
    ], dtype=np.int64)
    return TriMesh(corners, tris)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Geodesic sphere by icosahedron subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key in cache:
                return cache[key]
            m = np.array(verts[i]) + np.array(verts[j])
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# OBJ I/O ("v x y z [r g b]" color extension, 1-based faces)

def save_obj(mesh: TriMesh, path) -> None:
    lines = []
    colors = mesh.vertex_colors
    for i, v in enumerate(mesh.vertices):
        if colors is not None:
            c = colors[i]
            lines.append("v %.9g %.9g %.9g %.9g %.9g %.9g"
                         % (v[0], v[1], v[2], c[0], c[1], c[2]))
        else:
            lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for t in mesh.triangles:
        lines.append("f %d %d %d" % (t[0] + 1, t[1] + 1, t[2] + 1))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, colors, tris = [], [], []
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                nums = [float(p) for p in parts[1:]]
                if len(nums) == 6:
                    verts.append(nums[:3])
                    colors.append(nums[3:])
                elif len(nums) == 3:
                    verts.append(nums)
                else:
                    raise ValueError(f"{path}: malformed vertex line: {line!r}")
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}: only triangle faces supported: {line!r}")
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                tris.append(idx)
    if colors and len(colors) != len(verts):
        raise ValueError(f"{path}: some vertices have colors, some do not")
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
        np.array(colors, dtype=np.float64) if colors else None,
    )
