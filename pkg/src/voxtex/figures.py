"""Procedural articulated humanoids.

A fixed joint tree posed by per-joint rotations drives a union of capsule
signed distances; marching cubes over the composed field yields a
watertight colored mesh.  An optional skirt frustum stands in for free
form clothing.  Figures replace scanned or parametric human datasets at
desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from skimage import measure

from .meshes import TriMesh, normalize_unit_cube

# joint -> (parent, rest offset in the parent frame); y is up, x is the
# figure's left, rest pose is a T pose
SKELETON = {
    "pelvis": (None, (0.0, 0.0, 0.0)),
    "spine": ("pelvis", (0.0, 0.24, 0.0)),
    "neck": ("spine", (0.0, 0.24, 0.0)),
    "head": ("neck", (0.0, 0.13, 0.0)),
    "l_shoulder": ("neck", (0.17, -0.02, 0.0)),
    "l_elbow": ("l_shoulder", (0.24, 0.0, 0.0)),
    "l_wrist": ("l_elbow", (0.22, 0.0, 0.0)),
    "r_shoulder": ("neck", (-0.17, -0.02, 0.0)),
    "r_elbow": ("r_shoulder", (-0.24, 0.0, 0.0)),
    "r_wrist": ("r_elbow", (-0.22, 0.0, 0.0)),
    "l_hip": ("pelvis", (0.10, -0.04, 0.0)),
    "l_knee": ("l_hip", (0.0, -0.42, 0.0)),
    "l_ankle": ("l_knee", (0.0, -0.40, 0.0)),
    "r_hip": ("pelvis", (-0.10, -0.04, 0.0)),
    "r_knee": ("r_hip", (0.0, -0.42, 0.0)),
    "r_ankle": ("r_knee", (0.0, -0.40, 0.0)),
}

JOINTS = tuple(SKELETON)

# per-joint (x, y, z) rotation bounds in radians
_TORSO = ((-0.3, 0.3),) * 3
_SOCKET = ((-0.8, 0.8), (-0.6, 0.6), (-0.9, 0.9))
_HINGE = ((0.0, 1.9), (-0.2, 0.2), (-0.2, 0.2))
_END = ((-0.4, 0.4),) * 3
JOINT_LIMITS = {
    "pelvis": _TORSO, "spine": _TORSO, "neck": _TORSO, "head": _TORSO,
    "l_shoulder": _SOCKET, "r_shoulder": _SOCKET,
    "l_hip": _SOCKET, "r_hip": _SOCKET,
    "l_elbow": _HINGE, "r_elbow": _HINGE,
    "l_knee": _HINGE, "r_knee": _HINGE,
    "l_wrist": _END, "r_wrist": _END,
    "l_ankle": _END, "r_ankle": _END,
}

SHAPE_PARTS = ("torso", "arms", "legs", "head")
COLOR_PARTS = ("skin", "shirt", "pants", "shoes")

# capsule set: (joint_a, joint_b or None, tip offset in joint_a's frame,
# base radius, shape part, color part).  A None joint_b uses the offset.
_BONES = (
    ("pelvis", "spine", None, 0.11, "torso", "shirt"),
    ("spine", "neck", None, 0.10, "torso", "shirt"),
    ("neck", "head", None, 0.045, "torso", "skin"),
    ("head", None, (0.0, 0.07, 0.0), 0.085, "head", "skin"),
    ("l_shoulder", "l_elbow", None, 0.045, "arms", "shirt"),
    ("l_elbow", "l_wrist", None, 0.04, "arms", "skin"),
    ("l_wrist", None, (0.07, 0.0, 0.0), 0.035, "arms", "skin"),
    ("r_shoulder", "r_elbow", None, 0.045, "arms", "shirt"),
    ("r_elbow", "r_wrist", None, 0.04, "arms", "skin"),
    ("r_wrist", None, (-0.07, 0.0, 0.0), 0.035, "arms", "skin"),
    ("l_hip", "l_knee", None, 0.06, "legs", "pants"),
    ("l_knee", "l_ankle", None, 0.05, "legs", "pants"),
    ("l_ankle", None, (0.0, -0.03, 0.10), 0.04, "legs", "shoes"),
    ("r_hip", "r_knee", None, 0.06, "legs", "pants"),
    ("r_knee", "r_ankle", None, 0.05, "legs", "pants"),
    ("r_ankle", None, (0.0, -0.03, 0.10), 0.04, "legs", "shoes"),
)

_BLEND = 0.02  # capsule union smoothing radius, figure units


@dataclass(frozen=True)
class FigureSpec:
    """One humanoid: pose angles, limb scales, part colors, clothing.

    pose maps joint names to (rx, ry, rz) radians within JOINT_LIMITS;
    omitted joints stay at rest.  shape scales capsule radii per part.
    stripes, when set, is (period, color) banding applied to the shirt.
    """

    pose: dict = field(default_factory=dict)
    shape: dict = field(default_factory=dict)
    colors: dict = field(default_factory=dict)
    stripes: Optional[tuple] = None
    skirt: bool = False
    resolution: int = 64

    def __post_init__(self):
        for joint, angles in self.pose.items():
            if joint not in SKELETON:
                raise ValueError(f"unknown joint {joint!r}")
            if len(angles) != 3:
                raise ValueError(f"{joint} pose needs 3 angles")
            for axis, (angle, (lo, hi)) in enumerate(
                    zip(angles, JOINT_LIMITS[joint])):
                if not lo <= angle <= hi:
                    raise ValueError(
                        f"{joint} axis {axis} angle {angle:.3f} outside "
                        f"[{lo}, {hi}]")
        for part, s in self.shape.items():
            if part not in SHAPE_PARTS:
                raise ValueError(f"unknown shape part {part!r}")
            if s <= 0.0:
                raise ValueError(f"shape scale for {part} must be > 0")
        for part, c in self.colors.items():
            if part not in COLOR_PARTS:
                raise ValueError(f"unknown color part {part!r}")
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (3,) or c.min() < 0.0 or c.max() > 1.0:
                raise ValueError(f"{part} color must be 3 values in [0,1]")
        if self.stripes is not None:
            period, color = self.stripes
            color = np.asarray(color, dtype=np.float64)
            if period <= 0.0 or color.shape != (3,) \
                    or color.min() < 0.0 or color.max() > 1.0:
                raise ValueError("stripes must be (period > 0, rgb in [0,1])")
        if self.resolution < 16:
            raise ValueError("figure sampling resolution must be >= 16")


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def forward_kinematics(pose: dict) -> dict:
    """Joint name -> (world position, world rotation) for the given pose."""
    out = {}
    for joint, (parent, offset) in SKELETON.items():
        local = _rotation(*pose.get(joint, (0.0, 0.0, 0.0)))
        if parent is None:
            out[joint] = (np.zeros(3), local)
        else:
            ppos, prot = out[parent]
            out[joint] = (ppos + prot @ np.asarray(offset), prot @ local)
    return out


# --------------------------------------------------------- distance field

def _capsule_sdf(points, a, b, radius):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=-1) - radius
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1) - radius


def _capped_cone_sdf(points, a, b, ra, rb):
    ba = b - a
    baba = float(ba @ ba)
    pa = points - a
    papa = np.einsum("...i,...i->...", pa, pa)
    paba = (pa @ ba) / baba
    x = np.sqrt(np.maximum(papa - paba * paba * baba, 0.0))
    cax = np.maximum(x - np.where(paba < 0.5, ra, rb), 0.0)
    cay = np.abs(paba - 0.5) - 0.5
    k = (rb - ra) ** 2 + baba
    f = np.clip(((rb - ra) * (x - ra) + paba * baba) / k, 0.0, 1.0)
    cbx = x - ra - f * (rb - ra)
    cby = paba - f
    s = np.where((cbx < 0.0) & (cay < 0.0), -1.0, 1.0)
    return s * np.sqrt(np.minimum(cax * cax + cay * cay * baba,
                                  cbx * cbx + cby * cby * baba))


def _smooth_min(d1, d2, k=_BLEND):
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 * (1.0 - h) + d1 * h - k * h * (1.0 - h)


def _figure_capsules(spec: FigureSpec):
    """(a, b, radius, color part) per capsule, in figure units."""
    joints = forward_kinematics(spec.pose)
    caps = []
    for name_a, name_b, tip, radius, part, color in _BONES:
        pos_a, rot_a = joints[name_a]
        if name_b is not None:
            pos_b = joints[name_b][0]
        else:
            pos_b = pos_a + rot_a @ np.asarray(tip)
        caps.append((pos_a, pos_b, radius * spec.shape.get(part, 1.0),
                     color))
    return caps, joints


def _skirt_frustum(joints, spec: FigureSpec):
    pelvis = joints["pelvis"][0]
    a = pelvis + np.array([0.0, 0.05, 0.0])
    b = pelvis + np.array([0.0, -0.38, 0.0])
    ra = 0.13 * spec.shape.get("torso", 1.0)
    rb = 0.26 * spec.shape.get("legs", 1.0)
    return a, b, ra, rb


def figure_sdf(points: np.ndarray, spec: FigureSpec) -> np.ndarray:
    """Signed distance of the composed figure at the given points."""
    caps, joints = _figure_capsules(spec)
    d = None
    for a, b, r, _ in caps:
        di = _capsule_sdf(points, a, b, r)
        d = di if d is None else _smooth_min(d, di)
    if spec.skirt:
        a, b, ra, rb = _skirt_frustum(joints, spec)
        d = _smooth_min(d, _capped_cone_sdf(points, a, b, ra, rb))
    return d


_DEFAULT_COLORS = {"skin": (0.85, 0.68, 0.55), "shirt": (0.25, 0.4, 0.7),
                   "pants": (0.3, 0.3, 0.35), "shoes": (0.15, 0.12, 0.1)}


def _vertex_colors(verts: np.ndarray, spec: FigureSpec) -> np.ndarray:
    caps, joints = _figure_capsules(spec)
    dists = np.stack([_capsule_sdf(verts, a, b, r) for a, b, r, _ in caps])
    parts = [color for _, _, _, color in caps]
    if spec.skirt:
        a, b, ra, rb = _skirt_frustum(joints, spec)
        dists = np.vstack([dists,
                           _capped_cone_sdf(verts, a, b, ra, rb)[None]])
        parts.append("pants")
    owner = dists.argmin(axis=0)
    palette = {**_DEFAULT_COLORS, **spec.colors}
    colors = np.array([palette[parts[i]] for i in owner], dtype=np.float64)
    if spec.stripes is not None:
        period, stripe = spec.stripes
        shirt = np.array([parts[i] == "shirt" for i in owner])
        band = np.floor(verts[:, 1] / period).astype(np.int64) % 2 == 1
        colors[shirt & band] = np.asarray(stripe, dtype=np.float64)
    return colors


def generate_figure(spec_or_seed) -> TriMesh:
    """Colored watertight mesh in the normalized unit-cube frame.

    Accepts a FigureSpec or an integer seed (the seed draws a random
    subject and pose).  The same seed always returns the same mesh.
    """
    if isinstance(spec_or_seed, FigureSpec):
        spec = spec_or_seed
    else:
        rng = np.random.default_rng(spec_or_seed)
        spec = FigureSpec(pose=sample_pose(rng), **sample_subject(rng))
    caps, joints = _figure_capsules(spec)
    pts = np.concatenate([np.stack([a, b]) for a, b, _, _ in caps])
    radius = max(r for _, _, r, _ in caps)
    if spec.skirt:
        a, b, ra, rb = _skirt_frustum(joints, spec)
        pts = np.concatenate([pts, np.stack([a, b])])
        radius = max(radius, ra, rb)
    margin = radius + 4 * _BLEND + 0.04
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    # sample the x axis symmetrically about the sagittal plane so a
    # mirror-symmetric pose yields a mirror-symmetric field
    half = max(abs(lo[0]), abs(hi[0]))
    lo[0], hi[0] = -half, half
    r = spec.resolution
    axes = [np.linspace(lo[i], hi[i], r) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = figure_sdf(grid.reshape(-1, 3), spec).reshape(r, r, r)
    if not (values < 0.0).any():
        raise ValueError("figure distance field has no interior")
    spacing = [(hi[i] - lo[i]) / (r - 1) for i in range(3)]
    verts, faces, _, _ = measure.marching_cubes(values, level=0.0,
                                                spacing=spacing)
    verts = verts + lo
    tris = faces.astype(np.int64)
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) \
        & (tris[:, 0] != tris[:, 2])
    colors = _vertex_colors(verts, spec)
    mesh, _ = normalize_unit_cube(TriMesh(verts, tris[ok], colors))
    return mesh


# ---------------------------------------------------------------- sampling

def sample_pose(rng: np.random.Generator) -> dict:
    """Random pose: every joint drawn uniformly within its limits, scaled
    toward rest so limbs rarely fold into the torso."""
    pose = {}
    for joint, limits in JOINT_LIMITS.items():
        pose[joint] = tuple(0.7 * rng.uniform(lo, hi) for lo, hi in limits)
    return pose


def sample_subject(rng: np.random.Generator) -> dict:
    """Random per-subject identity: shape scales, colors, clothing."""
    shape = {part: float(rng.uniform(0.8, 1.25)) for part in SHAPE_PARTS}
    colors = {
        "skin": tuple(rng.uniform(0.45, 0.9, 3)),
        "shirt": tuple(rng.uniform(0.1, 0.9, 3)),
        "pants": tuple(rng.uniform(0.1, 0.7, 3)),
        "shoes": tuple(rng.uniform(0.05, 0.4, 3)),
    }
    stripes = None
    if rng.uniform() < 0.5:
        stripes = (float(rng.uniform(0.06, 0.15)),
                   tuple(rng.uniform(0.1, 0.9, 3)))
    skirt = bool(rng.uniform() < 0.3)
    return {"shape": shape, "colors": colors, "stripes": stripes,
            "skirt": skirt}
