"""Camera models and view containers for the virtual sensors.

Camera space: x right in the image, y down in the image, z forward (depth
along the viewing axis).  Pixel centers sit at integer coordinates; the
principal point defaults to the image center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_ORTHO_SIZE = 64
DEFAULT_ORTHO_NEAR = 0.5
DEFAULT_ORTHO_FAR = 1.5


@dataclass(frozen=True)
class Camera:
    """Rigid pose plus projection.

    kind is "perspective" (intrinsics = fx, fy, cx, cy in pixels) or
    "orthographic" (intrinsics = width_extent, height_extent in scene
    units).  rotation/translation map world points into camera space:
    p_cam = rotation @ p_world + translation.
    """

    kind: str
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: tuple
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.kind not in ("perspective", "orthographic"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "intrinsics", tuple(float(v) for v in self.intrinsics))
        if not self.near < self.far:
            raise ValueError("near must be less than far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.kind == "perspective":
            if len(self.intrinsics) != 4:
                raise ValueError("perspective intrinsics are (fx, fy, cx, cy)")
            if self.intrinsics[0] <= 0 or self.intrinsics[1] <= 0:
                raise ValueError("focal lengths must be positive")
        else:
            if len(self.intrinsics) != 2:
                raise ValueError("orthographic intrinsics are (width_extent, height_extent)")
            if self.intrinsics[0] <= 0 or self.intrinsics[1] <= 0:
                raise ValueError("extents must be positive")

    @property
    def eye(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing axis in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points to (u, v, depth); u,v in pixel-center coordinates.

        Perspective projection of points at or behind the eye plane is
        meaningless; callers clip first.
        """
        pc = self.to_camera(points)
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        if self.kind == "perspective":
            fx, fy, cx, cy = self.intrinsics
            u = fx * x / z + cx
            v = fy * y / z + cy
        else:
            we, he = self.intrinsics
            u = (x / we + 0.5) * self.width - 0.5
            v = (y / he + 0.5) * self.height - 0.5
        return u, v, z

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """(origins, directions) of one ray per pixel, row-major (H*W, 3).

        Directions are scaled so that depth along the camera axis equals the
        ray parameter t: p = origin + t * direction has camera-z equal to t
        for perspective and ortho alike.
        """
        us, vs = np.meshgrid(np.arange(self.width), np.arange(self.height))
        us = us.ravel().astype(np.float64)
        vs = vs.ravel().astype(np.float64)
        rot_inv = self.rotation.T
        if self.kind == "perspective":
            fx, fy, cx, cy = self.intrinsics
            dirs_cam = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)], axis=1)
            origins = np.broadcast_to(self.eye, (len(us), 3)).copy()
            dirs = dirs_cam @ rot_inv.T
        else:
            we, he = self.intrinsics
            x = ((us + 0.5) / self.width - 0.5) * we
            y = ((vs + 0.5) / self.height - 0.5) * he
            origins_cam = np.stack([x, y, np.zeros_like(x)], axis=1)
            origins = origins_cam @ rot_inv.T + self.eye
            dirs = np.broadcast_to(self.forward, (len(us), 3)).copy()
        return origins, dirs


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at eye looking
    at target with the given up direction kept pointing to the image top."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    f = target - eye
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    f = f / norm
    r = np.cross(up, f)
    norm = np.linalg.norm(r)
    if norm < 1e-12:
        raise ValueError("up is parallel to the viewing direction")
    r = r / norm
    d = np.cross(r, f)
    rotation = np.stack([r, d, f])
    translation = -rotation @ eye
    return rotation, translation


def perspective_camera(eye, target, width: int, height: int,
                       vfov_degrees: float = 60.0, near: float = 0.5,
                       far: float = 4.0, up=(0.0, 1.0, 0.0)) -> Camera:
    rotation, translation = look_at(eye, target, up)
    fy = (height / 2.0) / np.tan(np.radians(vfov_degrees) / 2.0)
    fx = fy
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    return Camera("perspective", rotation, translation, (fx, fy, cx, cy),
                  width, height, near, far)


def ortho_faces(size: int = DEFAULT_ORTHO_SIZE,
                near: float = DEFAULT_ORTHO_NEAR,
                far: float = DEFAULT_ORTHO_FAR) -> list[Camera]:
    """Orthographic cameras on the four side faces of the unit cube.

    Face i sits on the outward normal (cos 90i deg, 0, sin 90i deg): +x, +z,
    -x, -z in order.  Top and bottom faces are omitted.  Each camera views
    the full 1x1 face and its depth spans [near, far] across the cube.
    """
    center = np.array([0.5, 0.5, 0.5])
    cams = []
    for i in range(4):
        angle = np.radians(90.0 * i)
        normal = np.array([np.cos(angle), 0.0, np.sin(angle)])
        normal[np.abs(normal) < 1e-15] = 0.0
        eye = center + normal
        rotation, translation = look_at(eye, center)
        cams.append(Camera("orthographic", rotation, translation, (1.0, 1.0),
                           size, size, near, far))
    return cams


@dataclass(frozen=True)
class ViewImage:
    """One rendered or captured view: rgb and/or depth plus its camera.

    rgb is (H, W, 3) in [0,1]; depth is (H, W) in scene units with 0 for
    background.  face_index tags the four orthographic side views 0..3.
    """

    camera: Camera
    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    face_index: Optional[int] = None

    def __post_init__(self):
        if self.rgb is None and self.depth is None:
            raise ValueError("a view needs rgb or depth")
        h, w = self.camera.height, self.camera.width
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float64)
            if rgb.shape != (h, w, 3):
                raise ValueError(f"rgb shape {rgb.shape} does not match camera {h}x{w}")
            if rgb.min() < 0.0 or rgb.max() > 1.0:
                raise ValueError("rgb values must lie in [0,1]")
            object.__setattr__(self, "rgb", rgb)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != (h, w):
                raise ValueError(f"depth shape {depth.shape} does not match camera {h}x{w}")
            covered = depth[depth != 0.0]
            eps = 1e-9
            if covered.size and (covered.min() < self.camera.near - eps
                                 or covered.max() > self.camera.far + eps):
                raise ValueError("depth values must be 0 or within [near, far]")
            object.__setattr__(self, "depth", depth)
        if self.face_index is not None and self.face_index not in (0, 1, 2, 3):
            raise ValueError("face_index must be 0..3")
