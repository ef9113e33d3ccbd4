"""Weights files: magic "NNWT", version byte, 32-byte config hash, then
per-tensor records of {name, extents, float32 little-endian values}."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"NNWT"
VERSION = 1


class ModelParams:
    """Ordered name -> Tensor map tied to an architecture config hash."""

    def __init__(self, params: dict, config_hash: bytes):
        if len(config_hash) != 32:
            raise ValueError("config hash must be 32 bytes")
        names = list(params)
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = dict(params)
        self.config_hash = bytes(config_hash)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def require_shapes(self, shapes: dict) -> None:
        """Check this parameter set against expected {name: shape}."""
        missing = set(shapes) - set(self.params)
        extra = set(self.params) - set(shapes)
        if missing or extra:
            raise ValueError(
                f"parameter names do not match: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, shape in shapes.items():
            have = self.params[name].values.shape
            if tuple(have) != tuple(shape):
                raise ValueError(
                    f"parameter {name!r}: shape {have} vs expected {tuple(shape)}")


def config_hash(config: dict) -> bytes:
    """Stable hash of an architecture config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).digest()


def save_params(path, model: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(model.config_hash)
        for name, tensor in model.params.items():
            encoded = name.encode("utf-8")
            vals = np.ascontiguousarray(tensor.values, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", vals.ndim))
            fh.write(struct.pack(f"<{vals.ndim}I", *vals.shape))
            fh.write(vals.tobytes())


def load_params(path, expected_hash: bytes = None, force: bool = False
                ) -> ModelParams:
    """Read a weights file; refuses a config-hash mismatch unless forced."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic)")
    if len(raw) < 37:
        raise ValueError(f"{path}: corrupt weights file (truncated header)")
    version = raw[4]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    stored_hash = raw[5:37]
    if expected_hash is not None and stored_hash != expected_hash and not force:
        raise ValueError(
            f"{path}: architecture hash mismatch; these weights belong to a "
            f"different configuration (pass force to load anyway)")
    pos = 37
    params = {}
    def take(count, what):
        nonlocal pos
        if pos + count > len(raw):
            raise ValueError(f"{path}: corrupt weights file (truncated {what})")
        chunk = raw[pos:pos + count]
        pos += count
        return chunk
    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "record"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = take(4 * count, f"values of {name!r}")
        vals = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
        if name in params:
            raise ValueError(f"{path}: duplicate parameter {name!r}")
        params[name] = Tensor(vals, requires_grad=True)
    return ModelParams(params, stored_hash)
