"""Multi-view voxel reconstruction network.

Per-view residual encoder -> feature vectors, fused across views by
elementwise max or a convolutional 3D GRU, decoded by stride-2 transposed
convolutions into an occupancy probability grid.  Four input modes: RGB,
D, RGBD (4 channels), and RGB_or_D (one shared 3-channel encoder fed
either RGB or depth replicated across channels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .cameras import ViewImage
from .grids import VoxelGrid, iou
from .nn import (
    Adam, ModelParams, Tensor, add, affine, binary_cross_entropy, config_hash,
    conv2d, conv3d, fully_connected, global_avg_pool, he_normal, leaky_relu,
    maximum, mul, no_grad, parameter, reshape, scale, sigmoid, tanh,
    transposed_conv3d,
)
from .nn.tensor import accumulate_grad, make_result

INPUT_MODES = ("RGB", "D", "RGBD", "RGB_or_D")
FUSIONS = ("max_pool", "gru3d")

# Stride-2 stages in the encoder; the input image must divide evenly.
ENCODER_STAGES = 4

# Channels each mode feeds the encoder.  RGB_or_D shares one 3-channel
# encoder between RGB images and depth replicated onto three channels.
MODE_CHANNELS = {"RGB": 3, "D": 1, "RGBD": 4, "RGB_or_D": 3}


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


# ----------------------------------------------------------- configuration

@dataclass(frozen=True)
class ReconConfig:
    image_size: int = 64
    feature_dim: int = 128
    fusion: str = "max_pool"
    grid_out: int = 32
    seed_grid: int = 4
    seed_channels: int = 32
    input_mode: str = "RGB"
    max_views: int = 8

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(
                f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        div = 1 << ENCODER_STAGES
        if self.image_size <= 0 or self.image_size % div:
            raise ValueError(
                f"image_size must be a positive multiple of {div}, "
                f"got {self.image_size}")
        if self.feature_dim < 8:
            raise ValueError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.seed_grid < 1:
            raise ValueError(f"seed_grid must be >= 1, got {self.seed_grid}")
        if self.seed_channels < 1:
            raise ValueError(
                f"seed_channels must be >= 1, got {self.seed_channels}")
        if self.max_views < 1:
            raise ValueError(f"max_views must be >= 1, got {self.max_views}")
        ratio = self.grid_out / self.seed_grid
        k = int(round(np.log2(ratio))) if ratio >= 2 else 0
        if k < 1 or self.seed_grid << k != self.grid_out:
            raise ValueError(
                f"grid_out must be seed_grid * 2^k for k >= 1, got "
                f"{self.grid_out} from seed {self.seed_grid}")

    @property
    def in_channels(self) -> int:
        return MODE_CHANNELS[self.input_mode]

    @property
    def decoder_stages(self) -> int:
        return int(round(np.log2(self.grid_out / self.seed_grid)))

    @property
    def encoder_channels(self) -> tuple:
        f = self.feature_dim
        return (max(4, f >> 3), max(4, f >> 2), max(4, f >> 1), f)

    @property
    def decoder_channels(self) -> tuple:
        """Output channels after each upsampling stage, halving from the seed."""
        return tuple(max(8, self.seed_channels >> (i + 1))
                     for i in range(self.decoder_stages))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ------------------------------------------------------------------- views

@dataclass(frozen=True)
class ReconView:
    """Network-ready view: rgb in [0,1] and/or depth normalized to [0,1]
    with background exactly 0."""

    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rgb is None and self.depth is None:
            raise ValueError("a view needs rgb or depth")
        size = None
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float32)
            if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] != rgb.shape[1]:
                raise ValueError(f"rgb must be square (S,S,3), got {rgb.shape}")
            if rgb.min() < 0.0 or rgb.max() > 1.0:
                raise ValueError("rgb values must lie in [0,1]")
            size = rgb.shape[0]
            object.__setattr__(self, "rgb", rgb)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float32)
            if depth.ndim != 2 or depth.shape[0] != depth.shape[1]:
                raise ValueError(f"depth must be square (S,S), got {depth.shape}")
            if depth.min() < 0.0 or depth.max() > 1.0:
                raise ValueError("normalized depth must lie in [0,1]")
            if size is not None and depth.shape[0] != size:
                raise ValueError(
                    f"rgb {size}x{size} and depth {depth.shape[0]}x"
                    f"{depth.shape[0]} sizes differ")
            object.__setattr__(self, "depth", depth)

    @property
    def size(self) -> int:
        src = self.rgb if self.rgb is not None else self.depth
        return src.shape[0]


def view_from_image(image: ViewImage) -> ReconView:
    """Adapt a rendered view: depth maps to (d - near)/(far - near), with
    the 0 background sentinel kept at 0."""
    depth = None
    if image.depth is not None:
        cam = image.camera
        span = cam.far - cam.near
        depth = np.where(image.depth > 0.0,
                         (image.depth - cam.near) / span, 0.0)
        depth = np.clip(depth, 0.0, 1.0)
    return ReconView(rgb=image.rgb, depth=depth)


def view_channels(view: ReconView, mode: str, as_depth: bool = False
                  ) -> np.ndarray:
    """Channel stack (S,S,C) the encoder sees for one view.

    as_depth selects the depth presentation in RGB_or_D mode (depth
    replicated onto 3 channels); it is ignored elsewhere.
    """
    if mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {mode!r}")
    need_rgb = mode in ("RGB", "RGBD") or (mode == "RGB_or_D" and not as_depth)
    need_depth = mode in ("D", "RGBD") or (mode == "RGB_or_D" and as_depth)
    if need_rgb and view.rgb is None:
        raise ValueError(f"mode {mode} needs an rgb channel, view has none")
    if need_depth and view.depth is None:
        raise ValueError(f"mode {mode} needs a depth channel, view has none")
    if mode == "RGB":
        return view.rgb
    if mode == "D":
        return view.depth[:, :, None]
    if mode == "RGBD":
        return np.concatenate([view.rgb, view.depth[:, :, None]], axis=2)
    if as_depth:
        return np.repeat(view.depth[:, :, None], 3, axis=2)
    return view.rgb


# ------------------------------------------------------------ train samples

@dataclass(frozen=True)
class TrainSample:
    views: tuple
    target: VoxelGrid

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("a training sample needs at least one view")
        if not self.target.is_binary():
            raise ValueError("training target must be a binary grid")
        object.__setattr__(self, "views", views)


@dataclass(frozen=True)
class ReconDataset:
    train: tuple
    val: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "val", tuple(self.val))
        if not self.train:
            raise ValueError("dataset has no training samples")


# ------------------------------------------------------------ parameters

def init_recon_params(config: ReconConfig, rng: np.random.Generator,
                      dtype=np.float32) -> dict:
    """Fresh parameter dict; creation order fixes the serialization order."""
    p = {}

    def conv(name, kh, kw, ci, co):
        p[f"{name}.w"] = parameter(
            he_normal(rng, (kh, kw, ci, co), kh * kw * ci, dtype), dtype)
        p[f"{name}.b"] = parameter(np.zeros(co), dtype)

    def conv3(name, k, ci, co):
        p[f"{name}.w"] = parameter(
            he_normal(rng, (k, k, k, ci, co), k * k * k * ci, dtype), dtype)
        p[f"{name}.b"] = parameter(np.zeros(co), dtype)

    def fc(name, ci, co, bias=True):
        p[f"{name}.w"] = parameter(he_normal(rng, (ci, co), ci, dtype), dtype)
        if bias:
            p[f"{name}.b"] = parameter(np.zeros(co), dtype)

    chans = config.encoder_channels
    conv("enc.stem", 3, 3, config.in_channels, chans[0])
    prev = chans[0]
    for s, ch in enumerate(chans, start=1):
        conv(f"enc.s{s}.b1.c1", 3, 3, prev, ch)
        conv(f"enc.s{s}.b1.c2", 3, 3, ch, ch)
        conv(f"enc.s{s}.b1.proj", 1, 1, prev, ch)
        conv(f"enc.s{s}.b2.c1", 3, 3, ch, ch)
        conv(f"enc.s{s}.b2.c2", 3, 3, ch, ch)
        prev = ch
    fc("enc.fc", chans[-1], config.feature_dim)

    sg, sc = config.seed_grid, config.seed_channels
    if config.fusion == "gru3d":
        for gate in ("u", "r", "c"):
            conv3(f"gru.{gate}.h", 3, sc, sc)
            fc(f"gru.{gate}.x", config.feature_dim, sg ** 3 * sc, bias=False)
    else:
        fc("dec.seed", config.feature_dim, sg ** 3 * sc)

    prev = sc
    for s, ch in enumerate(config.decoder_channels, start=1):
        conv3(f"dec.s{s}.res", 3, prev, prev)
        conv3(f"dec.s{s}.up", 4, prev, ch)
        prev = ch
    conv3("dec.head", 1, prev, 1)
    # start biased toward empty space; most of the volume is background
    p["dec.head.b"].values[:] = -2.0
    return p


def recon_param_dict(params) -> dict:
    return params.params if isinstance(params, ModelParams) else params


# --------------------------------------------------------------- encoder

def _res_block2d(x: Tensor, p: dict, prefix: str, stride: int) -> Tensor:
    y = leaky_relu(conv2d(x, p[f"{prefix}.c1.w"], p[f"{prefix}.c1.b"],
                          stride, 1))
    y = conv2d(y, p[f"{prefix}.c2.w"], p[f"{prefix}.c2.b"], 1, 1)
    if f"{prefix}.proj.w" in p:
        shortcut = conv2d(x, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"],
                          stride, 0)
    else:
        shortcut = x
    return leaky_relu(add(y, shortcut))


def encode_views(x: Tensor, params, config: ReconConfig) -> Tensor:
    """(N,S,S,C) image stack -> (N, feature_dim)."""
    p = recon_param_dict(params)
    n, h, w, c = x.values.shape
    if h != config.image_size or w != config.image_size or c != config.in_channels:
        raise ValueError(
            f"encoder expects (N,{config.image_size},{config.image_size},"
            f"{config.in_channels}), got {x.values.shape}")
    y = leaky_relu(conv2d(x, p["enc.stem.w"], p["enc.stem.b"], 1, 1))
    for s in range(1, ENCODER_STAGES + 1):
        y = _res_block2d(y, p, f"enc.s{s}.b1", stride=2)
        y = _res_block2d(y, p, f"enc.s{s}.b2", stride=1)
    pooled = global_avg_pool(y)
    return leaky_relu(fully_connected(pooled, p["enc.fc.w"], p["enc.fc.b"]))


def encode_view(view: ReconView, params, config: ReconConfig,
                as_depth: bool = False) -> np.ndarray:
    """Feature vector for a single view, inference only."""
    chans = view_channels(view, config.input_mode, as_depth)
    with no_grad():
        feat = encode_views(Tensor(chans[None].astype(np.float32)),
                            params, config)
    return feat.values[0]


# ----------------------------------------------------------------- fusion

def fuse_maxpool(features: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum across views; order cannot matter."""
    features = list(features)
    if not features:
        raise ValueError("cannot fuse an empty feature list")
    shape = features[0].values.shape
    for f in features[1:]:
        if f.values.shape != shape:
            raise ValueError(
                f"feature shapes differ: {shape} vs {f.values.shape}")
    out = features[0]
    for f in features[1:]:
        out = maximum(out, f)
    return out


def fuse_gru3d(features: Sequence[Tensor], params, config: ReconConfig
               ) -> Tensor:
    """Run views through the convolutional GRU; returns the final hidden
    grid (B, sg, sg, sg, C).

    Gates: u = sigmoid(conv(h) + Wu f); r likewise; candidate
    c = tanh(conv(r*h) + Wc f); h' = u*c + (1-u)*h from h0 = 0.
    """
    features = list(features)
    if not features:
        raise ValueError("cannot fuse an empty feature sequence")
    p = recon_param_dict(params)
    sg, sc = config.seed_grid, config.seed_channels
    batch = features[0].values.shape[0]
    dtype = features[0].values.dtype
    grid_shape = (batch, sg, sg, sg, sc)
    h = Tensor(np.zeros(grid_shape, dtype=dtype))
    no_bias = Tensor(np.zeros(sg ** 3 * sc, dtype=dtype))

    def inject(f, gate):
        flat = fully_connected(f, p[f"gru.{gate}.x.w"], no_bias)
        return reshape(flat, grid_shape)

    for f in features:
        u = sigmoid(add(conv3d(h, p["gru.u.h.w"], p["gru.u.h.b"], 1, 1),
                        inject(f, "u")))
        r = sigmoid(add(conv3d(h, p["gru.r.h.w"], p["gru.r.h.b"], 1, 1),
                        inject(f, "r")))
        c = tanh(add(conv3d(mul(r, h), p["gru.c.h.w"], p["gru.c.h.b"], 1, 1),
                     inject(f, "c")))
        h = add(mul(u, c), mul(affine(u, -1.0, 1.0), h))
    return h


# ---------------------------------------------------------------- decoder

def decode(fused: Tensor, params, config: ReconConfig) -> Tensor:
    """Fused representation -> occupancy probabilities (B, G, G, G).

    Accepts either a (B, feature_dim) vector (max-pool path; projected to
    the seed grid) or an already volumetric (B, sg, sg, sg, C) state.
    """
    p = recon_param_dict(params)
    sg, sc = config.seed_grid, config.seed_channels
    if fused.values.ndim == 2:
        if fused.values.shape[1] != config.feature_dim:
            raise ValueError(
                f"fused vector has {fused.values.shape[1]} features, "
                f"expected {config.feature_dim}")
        seed = fully_connected(fused, p["dec.seed.w"], p["dec.seed.b"])
        x = reshape(leaky_relu(seed), (-1, sg, sg, sg, sc))
    elif fused.values.ndim == 5:
        if fused.values.shape[1:] != (sg, sg, sg, sc):
            raise ValueError(
                f"fused grid shape {fused.values.shape[1:]} does not match "
                f"seed ({sg},{sg},{sg},{sc})")
        x = fused
    else:
        raise ValueError(
            f"fused input must be a vector or a 5-d grid, got shape "
            f"{fused.values.shape}")
    for s in range(1, config.decoder_stages + 1):
        # residual refinement at the incoming resolution, then upsample
        res = conv3d(x, p[f"dec.s{s}.res.w"], p[f"dec.s{s}.res.b"], 1, 1)
        x = leaky_relu(add(x, res))
        x = leaky_relu(transposed_conv3d(x, p[f"dec.s{s}.up.w"],
                                         p[f"dec.s{s}.up.b"], 2, 1))
    logits = conv3d(x, p["dec.head.w"], p["dec.head.b"], 1, 0)
    g = config.grid_out
    return reshape(sigmoid(logits), (-1, g, g, g))


def recon_forward(view_stack, params, config: ReconConfig) -> Tensor:
    """(B, k, S, S, C) channel stacks -> (B, G, G, G) probabilities.

    Accepts a numpy array or a Tensor leaf (for gradient probing).
    """
    if not isinstance(view_stack, Tensor):
        view_stack = Tensor(view_stack)
    b, k = view_stack.values.shape[:2]
    flat = reshape(view_stack, (b * k,) + view_stack.values.shape[2:])
    feats = encode_views(flat, params, config)
    feats3 = reshape(feats, (b, k, config.feature_dim))
    views = [_slice_view(feats3, i) for i in range(k)]
    if config.fusion == "max_pool":
        fused = fuse_maxpool(views)
    else:
        fused = fuse_gru3d(views, params, config)
    return decode(fused, params, config)


def _slice_view(feats: Tensor, index: int) -> Tensor:
    """(B, k, F) -> (B, F) picking one view; gradient scatters back."""
    out = make_result(feats.values[:, index], (feats,))
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(feats.values)
            g[:, index] = out.grad
            accumulate_grad(feats, g)
        out._backward = _backward
    return out


# --------------------------------------------------------------- training

def _batch_stack(samples, view_ids, config: ReconConfig, as_depth) -> np.ndarray:
    stacks = []
    for sample, ids, depth_flag in zip(samples, view_ids, as_depth):
        chans = [view_channels(sample.views[i], config.input_mode, depth_flag)
                 for i in ids]
        stacks.append(np.stack(chans))
    return np.stack(stacks).astype(np.float32)


def _validate_samples(samples, config: ReconConfig, what: str) -> None:
    for n, sample in enumerate(samples):
        if sample.target.resolution != config.grid_out:
            raise ValueError(
                f"{what} sample {n}: target resolution "
                f"{sample.target.resolution} != grid_out {config.grid_out}")
        for view in sample.views:
            if view.size != config.image_size:
                raise ValueError(
                    f"{what} sample {n}: view size {view.size} != "
                    f"image_size {config.image_size}")


def _val_iou(val_samples, params, config: ReconConfig) -> Optional[float]:
    """Mean single-view IoU over held-out samples; RGB_or_D evaluates the
    RGB presentation (the co-training payoff is RGB-only testing)."""
    if not val_samples:
        return None
    scores = []
    for sample in val_samples:
        grid = reconstruct([sample.views[0]], params, config)
        scores.append(iou(grid, sample.target))
    return float(np.mean(scores))


def train_recon(dataset: ReconDataset, config: ReconConfig, epochs: int,
                seed: int, lr: float = 1e-4, batch_size: int = 5,
                weight_decay: float = 1e-5, log_path=None):
    """Train from scratch; returns (ModelParams, metrics log).

    One log record per epoch: {epoch, train_loss, val_iou, mode, seed},
    plus presentation counts in RGB_or_D mode.  train_loss is the mean
    over iterations of per-sample-averaged summed cross entropy.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    _validate_samples(dataset.train, config, "train")
    _validate_samples(dataset.val, config, "val")
    rng = np.random.default_rng(seed)
    params = init_recon_params(config, rng)
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    n = len(dataset.train)
    mixed = config.input_mode == "RGB_or_D"
    log = []
    for epoch in range(epochs):
        # fair coin per sample per epoch decides RGB vs depth presentation
        presented_depth = (rng.uniform(size=n) < 0.5) if mixed \
            else np.zeros(n, dtype=bool)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            chosen = order[start:start + batch_size]
            batch = [dataset.train[i] for i in chosen]
            avail = min(config.max_views,
                        min(len(s.views) for s in batch))
            k = int(rng.integers(1, avail + 1))
            view_ids = [rng.permutation(len(s.views))[:k] for s in batch]
            stack = _batch_stack(batch, view_ids, config,
                                 presented_depth[chosen])
            targets = np.stack([s.target.values for s in batch]
                               ).astype(np.float32)
            opt.zero_grad()
            try:
                probs = recon_forward(stack, params, config)
                loss = scale(binary_cross_entropy(probs, targets),
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
            val_iou = _val_iou(dataset.val, params, config)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"epoch {epoch}, validation: {exc}") from exc
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_iou": val_iou,
            "mode": config.input_mode,
            "seed": seed,
        }
        if mixed:
            record["d_count"] = int(presented_depth.sum())
            record["rgb_count"] = int(n - presented_depth.sum())
        log.append(record)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    model = ModelParams(params, config_hash(config.to_dict()))
    return model, log


# -------------------------------------------------------------- inference

def reconstruct(views: Sequence[ReconView], params, config: ReconConfig,
                prefer_depth: bool = False) -> VoxelGrid:
    """Probability grid from 1..max_views views; threshold at 0.5 downstream.

    In RGB_or_D mode all views must offer the same modality; RGB wins when
    both are present unless prefer_depth is set.
    """
    views = list(views)
    if not 1 <= len(views) <= config.max_views:
        raise ValueError(
            f"need between 1 and {config.max_views} views, got {len(views)}")
    if isinstance(params, ModelParams):
        expected = config_hash(config.to_dict())
        if params.config_hash != expected:
            raise ValueError(
                "weights belong to a different configuration than the one "
                "given to reconstruct()")
    as_depth = False
    if config.input_mode == "RGB_or_D":
        have_rgb = all(v.rgb is not None for v in views)
        have_depth = all(v.depth is not None for v in views)
        if not have_rgb and not have_depth:
            raise ValueError(
                "RGB_or_D inference needs all-RGB or all-D views, got a "
                "mixed set")
        as_depth = prefer_depth if (have_rgb and have_depth) else have_depth
    chans = [view_channels(v, config.input_mode, as_depth) for v in views]
    stack = np.stack(chans)[None].astype(np.float32)
    with no_grad():
        probs = recon_forward(stack, params, config)
    return VoxelGrid(probs.values[0].astype(np.float64))
