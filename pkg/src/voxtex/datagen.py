"""Virtual capture rig and dataset writer.

Renders procedural figures through a ring of perspective RGBD cameras,
voxelizes ground truth, renders the four orthographic faces, and writes
everything plus a JSON manifest.  Loader helpers adapt a generated
directory into training datasets for the two models.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cameras import Camera, ViewImage, perspective_camera
from .figures import FigureSpec, generate_figure, sample_pose, sample_subject
from .grids import VoxelGrid, load_voxels, save_voxels
from .images import load_depth, load_ppm, save_depth, save_ppm
from .meshes import TriMesh, load_obj, save_obj
from .recon import ReconDataset, TrainSample, view_from_image
from .render import rasterize, render_ortho_views
from .texture import TextureDataset, TextureSample, normalized_ortho_depth
from .voxelize import voxelize

BACKGROUNDS = ("flat", "clutter")
FLAT_BACKGROUND = (0.0, 0.0, 0.0)

# normalized meshes span at most [0.05,0.95] per axis, so everything fits
# a sphere of half-diagonal sqrt(3)*0.45 ~ 0.78 around the cube center
_SCENE_RADIUS = 0.8
_CUBE_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass(frozen=True)
class RigSpec:
    """Capture setup: a ring of inward-looking perspective RGBD cameras.

    radius and height place the ring relative to the working-volume
    center; jitter perturbs each camera's ring angle (radians) and height
    per capture.  background selects flat black or per-view clutter.
    """

    n_cameras: int = 8
    radius: float = 1.8
    height: float = 0.3
    jitter: float = 0.0
    background: str = "flat"
    image_size: int = 64
    vfov_degrees: float = 60.0
    near: float = 0.5
    far: float = 4.0

    def __post_init__(self):
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.jitter < 0.0:
            raise ValueError("jitter must be >= 0")
        if not 0.0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        # every jittered camera must keep the whole working volume inside
        # its frustum and depth range
        h_max = abs(self.height) + 0.3 * self.jitter
        d_min = self.radius
        d_max = np.hypot(self.radius, h_max)
        half_fov = np.radians(self.vfov_degrees) / 2.0
        if d_min <= _SCENE_RADIUS \
                or np.arcsin(_SCENE_RADIUS / d_min) > half_fov:
            raise ValueError(
                f"ring radius {self.radius} too tight for a {_SCENE_RADIUS}"
                f" working sphere at vfov {self.vfov_degrees}")
        if d_min - _SCENE_RADIUS < self.near:
            raise ValueError("working volume crosses the near plane")
        if d_max + _SCENE_RADIUS > self.far:
            raise ValueError("working volume exceeds the far plane")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RigSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown rig keys: {sorted(unknown)}")
        return cls(**data)


def ring_cameras(rig: RigSpec, rng: np.random.Generator) -> list:
    """One capture's cameras: evenly spaced ring angles plus jitter."""
    cams = []
    for i in range(rig.n_cameras):
        angle = 2.0 * np.pi * i / rig.n_cameras
        if rig.jitter > 0.0:
            angle += rng.uniform(-rig.jitter, rig.jitter)
            height = rig.height + 0.3 * rng.uniform(-rig.jitter, rig.jitter)
        else:
            height = rig.height
        eye = _CUBE_CENTER + np.array([rig.radius * np.cos(angle), height,
                                       rig.radius * np.sin(angle)])
        cams.append(perspective_camera(eye, _CUBE_CENTER, rig.image_size,
                                       rig.image_size, rig.vfov_degrees,
                                       rig.near, rig.far))
    return cams


def clutter_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave value noise in [0.05, 0.95], one texture per call."""
    img = np.zeros((size, size, 3))
    for cells, amplitude in ((4, 0.55), (8, 0.3), (16, 0.15)):
        coarse = rng.uniform(size=(cells + 1, cells + 1, 3))
        pos = np.linspace(0.0, cells, size)
        i0 = np.minimum(pos.astype(np.int64), cells - 1)
        frac = pos - i0
        rows = (coarse[i0] * (1.0 - frac)[:, None, None]
                + coarse[i0 + 1] * frac[:, None, None])
        img += amplitude * (rows[:, i0] * (1.0 - frac)[None, :, None]
                            + rows[:, i0 + 1] * frac[None, :, None])
    lo, hi = img.min(), img.max()
    return np.clip(0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-9), 0.05, 0.95)


# ----------------------------------------------------------------- writer

def _train_count(n_subjects: int) -> int:
    if n_subjects <= 1:
        return n_subjects
    return max(1, min(n_subjects - 1, round(n_subjects * 0.8)))


def generate_dataset(n_subjects: int, poses_per_subject: int, rig: RigSpec,
                     out_dir, seed: int, grid_out: int = 32,
                     ortho_size: int = 64, figure_resolution: int = 64
                     ) -> dict:
    """Write a full dataset and its manifest; returns the manifest dict.

    Subjects split 80:20 into train/test (test subjects are never seen in
    training).  Per sample: n_cameras RGB + depth views, the solid voxel
    grid, the colored mesh, and the four orthographic RGB + depth faces.
    A failure mid-run removes everything written so far.
    """
    if n_subjects < 1 or poses_per_subject < 1:
        raise ValueError("need at least one subject and one pose each")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = _train_count(n_subjects)
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    samples = []
    written = []

    def emit(path: Path):
        written.append(path)
        return str(path)

    try:
        for si in range(n_subjects):
            rng = np.random.default_rng(children[si])
            subject = sample_subject(rng)
            split = "train" if si < n_train else "test"
            for pi in range(poses_per_subject):
                spec = FigureSpec(pose=sample_pose(rng),
                                  resolution=figure_resolution, **subject)
                mesh = generate_figure(spec)
                grid, _ = voxelize(mesh, grid_out)
                sid = f"s{si:03d}_p{pi:02d}"

                mesh_name = f"{sid}_mesh.obj"
                save_obj(mesh, emit(out / mesh_name))
                vox_name = f"{sid}_gt.voxl"
                save_voxels(grid, emit(out / vox_name))

                cams = ring_cameras(rig, rng)
                views = []
                for vi, cam in enumerate(cams):
                    if rig.background == "clutter":
                        bg = clutter_background(rng, rig.image_size)
                    else:
                        bg = FLAT_BACKGROUND
                    shot = rasterize(mesh, cam, background=bg)
                    rgb_name = f"{sid}_view{vi}_rgb.ppm"
                    save_ppm(emit(out / rgb_name), shot.rgb)
                    depth_name = f"{sid}_view{vi}_depth.pgm"
                    save_depth(emit(out / depth_name), shot.depth, cam)
                    written.append(out / f"{depth_name}.json")
                    views.append({"rgb": rgb_name, "depth": depth_name,
                                  "camera": f"{depth_name}.json"})

                ortho_rgb, ortho_depth = render_ortho_views(mesh, ortho_size)
                ortho = []
                for fi, (rv, dv) in enumerate(zip(ortho_rgb, ortho_depth)):
                    rgb_name = f"{sid}_ortho{fi}_rgb.ppm"
                    save_ppm(emit(out / rgb_name), rv.rgb)
                    depth_name = f"{sid}_ortho{fi}_depth.pgm"
                    save_depth(emit(out / depth_name), dv.depth, dv.camera)
                    written.append(out / f"{depth_name}.json")
                    ortho.append({"rgb": rgb_name, "depth": depth_name,
                                  "camera": f"{depth_name}.json"})

                samples.append({"id": sid, "split": split,
                                "mesh": mesh_name, "voxels": vox_name,
                                "views": views, "ortho": ortho})
        manifest = {"seed": seed, "rig": rig.to_dict(), "grid_out": grid_out,
                    "ortho_size": ortho_size, "samples": samples}
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except BaseException:
        for path in written:
            try:
                os.unlink(path)
            except OSError:
                pass
        raise
    return manifest


# ----------------------------------------------------------------- loader

def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {out_dir}")
    return json.loads(path.read_text())


@dataclass(frozen=True)
class SampleData:
    """One loaded sample: everything generate_dataset wrote for it."""

    id: str
    split: str
    mesh: TriMesh
    grid: VoxelGrid
    views: list
    ortho_rgb: list
    ortho_depth: list


def load_sample(out_dir, entry: dict) -> SampleData:
    root = Path(out_dir)
    mesh = load_obj(root / entry["mesh"])
    grid = load_voxels(root / entry["voxels"])
    views = []
    for v in entry["views"]:
        depth, cam = load_depth(root / v["depth"])
        rgb = load_ppm(root / v["rgb"])
        views.append(ViewImage(camera=cam, rgb=rgb, depth=depth))
    ortho_rgb, ortho_depth = [], []
    for fi, v in enumerate(entry["ortho"]):
        depth, cam = load_depth(root / v["depth"])
        rgb = load_ppm(root / v["rgb"])
        ortho_rgb.append(ViewImage(camera=cam, rgb=rgb, face_index=fi))
        ortho_depth.append(ViewImage(camera=cam, depth=depth,
                                     face_index=fi))
    return SampleData(id=entry["id"], split=entry["split"], mesh=mesh,
                      grid=grid, views=views, ortho_rgb=ortho_rgb,
                      ortho_depth=ortho_depth)


def recon_dataset_from_manifest(out_dir, manifest: dict = None
                                ) -> ReconDataset:
    """Adapt a generated directory for occupancy training; the manifest's
    test subjects become the validation split."""
    manifest = manifest if manifest is not None else load_manifest(out_dir)
    train, val = [], []
    for entry in manifest["samples"]:
        data = load_sample(out_dir, entry)
        sample = TrainSample(
            views=tuple(view_from_image(v) for v in data.views),
            target=data.grid)
        (train if data.split == "train" else val).append(sample)
    return ReconDataset(train=train, val=val)


def texture_dataset_from_manifest(out_dir, manifest: dict = None
                                  ) -> TextureDataset:
    """Adapt a generated directory for texture training: per sample, four
    (face depth, perspective photo pool, face RGB) triples."""
    manifest = manifest if manifest is not None else load_manifest(out_dir)
    train, val = [], []
    for entry in manifest["samples"]:
        data = load_sample(out_dir, entry)
        pool = tuple(v.rgb for v in data.views)
        rows = train if data.split == "train" else val
        for rv, dv in zip(data.ortho_rgb, data.ortho_depth):
            rows.append(TextureSample(
                ortho_depth=normalized_ortho_depth(dv),
                persp_pool=pool, target=rv.rgb))
    return TextureDataset(train=train, val=val)
