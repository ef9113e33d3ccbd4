"""Conditional texture synthesis for reconstructed bodies.

A two-branch VAE consumes an orthographic depth image of one cube face
plus a perspective RGB photo and emits the orthographic RGB image of
that face.  One model serves all four side faces; the face identity is
implicit in the depth input.  texture_model() runs the four faces and
back-projects the results onto the extracted surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .cameras import ViewImage
from .grids import VoxelGrid
from .meshes import TriMesh
from .nn import (
    Adam, ModelParams, Tensor, add, clip, concat, config_hash, conv2d, exp,
    fully_connected, gaussian_kl, he_normal, l2_loss, mul, no_grad, parameter,
    relu, reshape, scale, sigmoid, upsample2d,
)
from .recon import TrainingDivergedError
from .render import render_ortho_views, backproject_texture
from .surface import extract_surface

LOG_VAR_LIMIT = 10.0


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class VaeConfig:
    """Texture VAE shape plan.

    The encoder ladder downsamples by 2 per layer and must reach 1x1, so
    input_size = 2 ** len(encoder_channels).  The decoder starts from a
    seed_size^2 map and doubles after every other convolution until the
    output matches input_size.
    """

    input_size: int = 64
    encoder_channels: tuple = (16, 32, 64, 64, 128, 256)
    encoder_filters: tuple = (5, 5, 3, 3, 3, 4)
    latent_dim: int = 64
    decoder_channels: tuple = (64, 64, 64, 32, 16, 3)
    decoder_filter: int = 5
    seed_size: int = 8

    def __post_init__(self):
        enc = tuple(int(c) for c in self.encoder_channels)
        filt = tuple(int(f) for f in self.encoder_filters)
        dec = tuple(int(c) for c in self.decoder_channels)
        object.__setattr__(self, "encoder_channels", enc)
        object.__setattr__(self, "encoder_filters", filt)
        object.__setattr__(self, "decoder_channels", dec)
        if len(filt) != len(enc):
            raise ValueError(
                f"{len(enc)} encoder channels but {len(filt)} filters")
        if any(c < 1 for c in enc + dec) or self.latent_dim < 2:
            raise ValueError("channel counts must be >= 1 and latent_dim >= 2")
        if self.input_size != 2 ** len(enc):
            raise ValueError(
                f"encoder ladder of {len(enc)} stride-2 layers needs "
                f"input_size {2 ** len(enc)}, got {self.input_size}")
        size = self.input_size
        for f in filt:
            if not 2 <= f <= size + 2 * ((f - 1) // 2):
                raise ValueError(f"filter {f} too large at size {size}")
            size = (size + 2 * ((f - 1) // 2) - f) // 2 + 1
        if size != 1:
            raise ValueError("encoder ladder does not reduce to 1x1")
        if dec[-1] != 3:
            raise ValueError("decoder must end in 3 RGB channels")
        if self.seed_size < 1 or self.input_size % self.seed_size:
            raise ValueError(f"seed_size {self.seed_size} does not divide "
                             f"input_size {self.input_size}")
        ratio = self.input_size // self.seed_size
        if ratio & (ratio - 1):
            raise ValueError("input_size / seed_size must be a power of two")
        if len(dec) < 2 * self.n_upsamples:
            raise ValueError(
                f"{self.n_upsamples} upsamplings need at least "
                f"{2 * self.n_upsamples} decoder layers, got {len(dec)}")

    @property
    def n_upsamples(self) -> int:
        return (self.input_size // self.seed_size).bit_length() - 1

    @property
    def upsample_after(self) -> tuple:
        # after layers 1, 3, 5, ... so convolutions alternate with doublings
        return tuple(2 * i for i in range(self.n_upsamples))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fixed = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in data.items()}
        return cls(**fixed)


# ---------------------------------------------------------------- latents

@dataclass(frozen=True)
class LatentDist:
    """Diagonal Gaussian q(z|depth, rgb): mu and log-variance tensors."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        mu = self.mu if isinstance(self.mu, Tensor) else Tensor(self.mu)
        lv = (self.log_var if isinstance(self.log_var, Tensor)
              else Tensor(self.log_var))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", lv)
        if mu.values.shape != lv.values.shape:
            raise ValueError(f"mu shape {mu.values.shape} != log_var shape "
                             f"{lv.values.shape}")
        if not (np.isfinite(mu.values).all()
                and np.isfinite(lv.values).all()):
            raise ValueError("latent parameters must be finite")
        if (np.abs(lv.values) > LOG_VAR_LIMIT + 1e-6).any():
            raise ValueError(
                f"log_var must lie within [-{LOG_VAR_LIMIT}, {LOG_VAR_LIMIT}]")

    @property
    def dim(self) -> int:
        return self.mu.values.shape[-1]


def kl_to_standard_normal(d: LatentDist) -> Tensor:
    """KL(q || N(0, I)) summed over dimensions (and batch)."""
    return gaussian_kl(d.mu, d.log_var)


def reparameterize(d: LatentDist, noise=None) -> Tensor:
    """z = mu + exp(log_var / 2) * noise; noise defaults to zeros."""
    if noise is None:
        return d.mu
    noise = np.asarray(noise, dtype=d.mu.values.dtype)
    if noise.shape != d.mu.values.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent "
                         f"shape {d.mu.values.shape}")
    return add(d.mu, mul(exp(scale(d.log_var, 0.5)), Tensor(noise)))


# ------------------------------------------------------------- parameters

def init_vae_params(config: VaeConfig, rng: np.random.Generator,
                    dtype=np.float32) -> dict:
    """Fresh parameter dict; creation order fixes the serialization order."""
    p = {}

    def conv(name, k, ci, co):
        p[f"{name}.w"] = parameter(
            he_normal(rng, (k, k, ci, co), k * k * ci, dtype), dtype)
        p[f"{name}.b"] = parameter(np.zeros(co), dtype)

    def fc(name, ci, co):
        p[f"{name}.w"] = parameter(he_normal(rng, (ci, co), ci, dtype), dtype)
        p[f"{name}.b"] = parameter(np.zeros(co), dtype)

    chans = config.encoder_channels
    for branch, in_ch in (("d", 1), ("rgb", 3)):
        prev = in_ch
        for i, (ch, f) in enumerate(zip(chans, config.encoder_filters), 1):
            conv(f"enc.{branch}.c{i}", f, prev, ch)
            prev = ch
        fc(f"enc.{branch}.fc", chans[-1], chans[-1])
    fc("lat.mu", 2 * chans[-1], config.latent_dim)
    fc("lat.lv", 2 * chans[-1], config.latent_dim)

    dec = config.decoder_channels
    fc("dec.fc", config.latent_dim, config.seed_size ** 2 * dec[0])
    prev = dec[0]
    for i, ch in enumerate(dec, 1):
        conv(f"dec.c{i}", config.decoder_filter, prev, ch)
        prev = ch
    return p


def vae_param_dict(params) -> dict:
    return params.params if isinstance(params, ModelParams) else params


def _check_vae_hash(params, config: VaeConfig, caller: str) -> None:
    if isinstance(params, ModelParams):
        if params.config_hash != config_hash(config.to_dict()):
            raise ValueError(f"weights belong to a different configuration "
                             f"than the one given to {caller}()")


# ---------------------------------------------------------------- encoder

def _as_batch(x, channels: int, name: str, size: int):
    """Promote (S,S[,C]) or (B,S,S[,C]) input to a (B,S,S,C) Tensor."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    shape = t.values.shape
    if channels == 1 and shape[-1:] != (1,):
        shape = shape + (1,)
    batched = len(shape) == 4
    if not batched:
        shape = (1,) + shape
    if len(shape) != 4 or shape[1] != size or shape[2] != size \
            or shape[3] != channels:
        raise ValueError(
            f"{name} must be ({size},{size},{channels}) or batched, got "
            f"{tuple(t.values.shape)}")
    return reshape(t, shape), batched


def _encode_branch(x: Tensor, p: dict, config: VaeConfig,
                   branch: str) -> Tensor:
    y = x
    for i, f in enumerate(config.encoder_filters, 1):
        y = relu(conv2d(y, p[f"enc.{branch}.c{i}.w"],
                        p[f"enc.{branch}.c{i}.b"], 2, (f - 1) // 2))
    y = reshape(y, (y.values.shape[0], y.values.shape[-1]))
    return relu(fully_connected(y, p[f"enc.{branch}.fc.w"],
                                p[f"enc.{branch}.fc.b"]))


def vae_encode(ortho_depth, persp_rgb, params, config: VaeConfig
               ) -> LatentDist:
    """Latent Gaussian from one face's depth plus a perspective photo.

    Accepts single images (S,S) / (S,S,3) or batches with a leading axis;
    mu and log_var mirror the batching of the inputs.
    """
    p = vae_param_dict(params)
    s = config.input_size
    d, d_batched = _as_batch(ortho_depth, 1, "ortho_depth", s)
    r, r_batched = _as_batch(persp_rgb, 3, "persp_rgb", s)
    if d.values.shape[0] != r.values.shape[0]:
        raise ValueError(f"batch sizes differ: depth {d.values.shape[0]} vs "
                         f"rgb {r.values.shape[0]}")
    h = concat([_encode_branch(d, p, config, "d"),
                _encode_branch(r, p, config, "rgb")], axis=1)
    mu = fully_connected(h, p["lat.mu.w"], p["lat.mu.b"])
    lv = clip(fully_connected(h, p["lat.lv.w"], p["lat.lv.b"]),
              -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
    if not (d_batched or r_batched):
        mu = reshape(mu, (config.latent_dim,))
        lv = reshape(lv, (config.latent_dim,))
    return LatentDist(mu, lv)


# ---------------------------------------------------------------- decoder

def vae_decode(z, params, config: VaeConfig) -> Tensor:
    """Latent (latent_dim,) or (B, latent_dim) -> RGB image(s) in [0,1]."""
    p = vae_param_dict(params)
    t = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    shape = t.values.shape
    batched = len(shape) == 2
    if not batched:
        shape = (1,) + shape
    if len(shape) != 2 or shape[1] != config.latent_dim:
        raise ValueError(f"latent must have {config.latent_dim} dimensions, "
                         f"got shape {tuple(t.values.shape)}")
    y = reshape(t, shape)
    y = relu(fully_connected(y, p["dec.fc.w"], p["dec.fc.b"]))
    seed = config.seed_size
    y = reshape(y, (shape[0], seed, seed, config.decoder_channels[0]))
    pad = (config.decoder_filter - 1) // 2
    last = len(config.decoder_channels)
    for i in range(1, last + 1):
        y = conv2d(y, p[f"dec.c{i}.w"], p[f"dec.c{i}.b"], 1, pad)
        y = sigmoid(y) if i == last else relu(y)
        if i - 1 in config.upsample_after:
            y = upsample2d(y, 2)
    if not batched:
        y = reshape(y, y.values.shape[1:])
    return y


# ------------------------------------------------------------------- loss

def vae_loss(pred_rgb: Tensor, target_rgb, d: LatentDist,
             beta: float = 1.0) -> Tensor:
    """Summed L2 reconstruction plus beta times the KL to N(0, I)."""
    target = np.asarray(target_rgb)
    if pred_rgb.values.shape != target.shape:
        raise ValueError(f"prediction shape {pred_rgb.values.shape} does not "
                         f"match target shape {target.shape}")
    recon = l2_loss(pred_rgb, target)
    if beta == 0.0:
        return recon
    return add(recon, scale(kl_to_standard_normal(d), beta))


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class TextureSample:
    """One training triple: a face's depth, candidate photos, RGB target.

    ortho_depth is (S,S) in [0,1] with background exactly 0.  persp_pool
    holds one or more (S,S,3) perspective photos; training draws one per
    epoch.  target is the (S,S,3) orthographic RGB of the same face.
    """

    ortho_depth: np.ndarray
    persp_pool: tuple
    target: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.ortho_depth, dtype=np.float32)
        target = np.asarray(self.target, dtype=np.float32)
        pool = tuple(np.asarray(v, dtype=np.float32)
                     for v in self.persp_pool)
        if depth.ndim != 2 or depth.shape[0] != depth.shape[1]:
            raise ValueError(f"ortho_depth must be square, got {depth.shape}")
        s = depth.shape[0]
        if depth.min() < 0.0 or depth.max() > 1.0:
            raise ValueError("ortho_depth values must lie in [0,1]")
        if not pool:
            raise ValueError("persp_pool must hold at least one photo")
        for v in pool:
            if v.shape != (s, s, 3) or v.min() < 0.0 or v.max() > 1.0:
                raise ValueError(
                    f"persp photos must be ({s},{s},3) in [0,1]")
        if target.shape != (s, s, 3) or target.min() < 0.0 \
                or target.max() > 1.0:
            raise ValueError(f"target must be ({s},{s},3) in [0,1]")
        object.__setattr__(self, "ortho_depth", depth)
        object.__setattr__(self, "persp_pool", pool)
        object.__setattr__(self, "target", target)

    @property
    def size(self) -> int:
        return self.ortho_depth.shape[0]


@dataclass(frozen=True)
class TextureDataset:
    train: Sequence[TextureSample]
    val: Sequence[TextureSample]


def _validate_texture_samples(samples, config: VaeConfig, split: str) -> None:
    if not samples:
        raise ValueError(f"{split} split is empty")
    for i, s in enumerate(samples):
        if not isinstance(s, TextureSample):
            raise ValueError(f"{split}[{i}] is not a TextureSample")
        if s.size != config.input_size:
            raise ValueError(f"{split}[{i}] images are {s.size}px but the "
                             f"model expects {config.input_size}px")


# --------------------------------------------------------------- training

def _val_mae(samples, params, config: VaeConfig) -> float:
    depth = np.stack([s.ortho_depth for s in samples])[..., None]
    rgb = np.stack([s.persp_pool[0] for s in samples])
    targets = np.stack([s.target for s in samples])
    with no_grad():
        pred = vae_decode(vae_encode(depth, rgb, params, config).mu,
                          params, config)
    return float(np.mean(np.abs(pred.values - targets)))


def train_texture(dataset: TextureDataset, config: VaeConfig,
                  epochs: int, seed: int, lr: float = 1e-4,
                  weight_decay: float = 1e-5, batch_size: int = 5,
                  beta: float = 1.0, log_path=None):
    """Fit the VAE on depth/photo/RGB triples; returns (ModelParams, log).

    Each epoch redraws every sample's perspective photo from its pool.
    One log record per epoch: {epoch, train_loss, val_mae, seed};
    train_loss is the mean over iterations of the per-sample-averaged
    summed loss.  Validation decodes at epsilon = 0 with each sample's
    first photo.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    _validate_texture_samples(dataset.train, config, "train")
    _validate_texture_samples(dataset.val, config, "val")
    rng = np.random.default_rng(seed)
    params = init_vae_params(config, rng)
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    n = len(dataset.train)
    log = []
    for epoch in range(epochs):
        picks = [int(rng.integers(len(s.persp_pool)))
                 for s in dataset.train]
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            chosen = order[start:start + batch_size]
            batch = [dataset.train[i] for i in chosen]
            depth = np.stack([s.ortho_depth for s in batch])[..., None]
            rgb = np.stack([s.persp_pool[picks[i]]
                            for i, s in zip(chosen, batch)])
            targets = np.stack([s.target for s in batch])
            noise = rng.standard_normal(
                (len(batch), config.latent_dim)).astype(np.float32)
            opt.zero_grad()
            try:
                latent = vae_encode(depth, rgb, params, config)
                pred = vae_decode(reparameterize(latent, noise),
                                  params, config)
                loss = scale(vae_loss(pred, targets, latent, beta),
                             1.0 / len(batch))
                value = float(loss.values)
                if not np.isfinite(value):
                    raise FloatingPointError(f"loss is {value}")
                loss.backward()
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, iteration {start // batch_size}: "
                    f"{exc}") from exc
            losses.append(value)
        try:
            val_mae = _val_mae(dataset.val, params, config)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"epoch {epoch}, validation: {exc}") from exc
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_mae": val_mae,
            "seed": seed,
        })
    if log_path is not None:
        with open(log_path, "w") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    model = ModelParams(params, config_hash(config.to_dict()))
    return model, log


# -------------------------------------------------------------- inference

def normalized_ortho_depth(view: ViewImage) -> np.ndarray:
    """Depth in scene units -> [0,1] with the 0 background kept at 0."""
    cam = view.camera
    span = cam.far - cam.near
    depth = np.where(view.depth > 0.0, (view.depth - cam.near) / span, 0.0)
    return np.clip(depth, 0.0, 1.0)


def texture_model(recon_grid: VoxelGrid, persp_rgb, params,
                  config: VaeConfig):
    """Texture a reconstructed occupancy grid from one photo.

    Extracts the surface, renders its four orthographic depth maps, runs
    the VAE per face at epsilon = 0 with the same photo as condition, and
    back-projects the synthesized images onto the mesh.  Returns the
    colored mesh and the four synthesized views.
    """
    _check_vae_hash(params, config, "texture_model")
    mesh = extract_surface(recon_grid)
    if mesh.is_empty:
        raise ValueError("empty surface: the grid has no occupied region "
                         "to texture")
    persp = np.asarray(persp_rgb, dtype=np.float32)
    if persp.shape != (config.input_size, config.input_size, 3):
        raise ValueError(
            f"persp_rgb must be ({config.input_size},{config.input_size},3),"
            f" got {persp.shape}")
    _, depth_views = render_ortho_views(mesh, config.input_size)
    depth = np.stack([normalized_ortho_depth(v) for v in depth_views])
    rgb = np.repeat(persp[None], len(depth_views), axis=0)
    with no_grad():
        latent = vae_encode(depth[..., None], rgb, params, config)
        pred = vae_decode(latent.mu, params, config)
    synthesized = [
        ViewImage(camera=dv.camera,
                  rgb=np.clip(pred.values[i].astype(np.float64), 0.0, 1.0),
                  face_index=dv.face_index)
        for i, dv in enumerate(depth_views)]
    colored = backproject_texture(mesh, synthesized, depth_views)
    return colored, synthesized
