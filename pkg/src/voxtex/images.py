"""Image files: 8-bit binary PPM for RGB, 16-bit binary PGM for depth.

Depth maps store 0 for background and map [near, far] linearly onto
[1, 65535]; the metadata needed to undo this (plus the camera) lives in a
JSON sidecar next to the PGM.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cameras import Camera

DEPTH_MAX = 65535


def save_ppm(path, rgb: np.ndarray) -> None:
    """Write (H, W, 3) floats in [0,1] as binary P6, 8 bits per channel."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb must be (H, W, 3)")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError("rgb values must lie in [0,1]")
    h, w, _ = rgb.shape
    data = np.rint(rgb * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read binary P6 into (H, W, 3) floats in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(raw, b"P6")
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval was {maxval}")
    need = w * h * 3
    if len(raw) - offset < need:
        raise ValueError("PPM file truncated")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_depth(path, depth: np.ndarray, camera: Camera) -> None:
    """Write a depth map as 16-bit big-endian P5 plus a JSON sidecar.

    Zero pixels stay zero (background); other values must lie within the
    camera's [near, far] and land on [1, 65535].
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth must be (H, W)")
    near, far = camera.near, camera.far
    covered = depth != 0.0
    vals = depth[covered]
    if vals.size and (vals.min() < near - 1e-9 or vals.max() > far + 1e-9):
        raise ValueError("depth values must be 0 or within [near, far]")
    h, w = depth.shape
    quant = np.zeros((h, w), dtype=np.uint16)
    scaled = 1.0 + (depth - near) / (far - near) * (DEPTH_MAX - 1)
    quant[covered] = np.rint(np.clip(scaled[covered], 1, DEPTH_MAX)).astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{DEPTH_MAX}\n".encode("ascii"))
        fh.write(quant.astype(">u2").tobytes())
    sidecar = {
        "near": near,
        "far": far,
        "kind": camera.kind,
        "pose": {
            "rotation": camera.rotation.tolist(),
            "translation": camera.translation.tolist(),
        },
        "intrinsics": list(camera.intrinsics),
        "width": camera.width,
        "height": camera.height,
    }
    Path(_sidecar_path(path)).write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_depth(path) -> tuple[np.ndarray, Camera]:
    """Read a 16-bit P5 depth map and its sidecar back into scene units."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(raw, b"P5")
    if maxval != DEPTH_MAX:
        raise ValueError(f"expected 16-bit PGM, maxval was {maxval}")
    need = w * h
    if len(raw) - offset < need * 2:
        raise ValueError("PGM file truncated")
    quant = np.frombuffer(raw, dtype=">u2", count=need, offset=offset)
    meta = json.loads(Path(_sidecar_path(path)).read_text())
    camera = Camera(meta["kind"], np.array(meta["pose"]["rotation"]),
                    np.array(meta["pose"]["translation"]),
                    tuple(meta["intrinsics"]), meta["width"], meta["height"],
                    meta["near"], meta["far"])
    near, far = meta["near"], meta["far"]
    quant = quant.reshape(h, w).astype(np.float64)
    depth = np.zeros((h, w), dtype=np.float64)
    covered = quant > 0
    depth[covered] = near + (quant[covered] - 1.0) / (DEPTH_MAX - 1) * (far - near)
    return depth, camera


def _sidecar_path(path) -> str:
    return str(path) + ".json"


def _parse_pnm_header(raw: bytes, magic: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse a binary PNM header, returning (magic, w, h, maxval, data offset).

    Handles '#' comments and arbitrary whitespace between tokens; the pixel
    data starts one whitespace byte after the maxval token.
    """
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    pos = len(magic)
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("malformed PNM header")
        tokens.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = tokens
    return magic, w, h, maxval, pos
