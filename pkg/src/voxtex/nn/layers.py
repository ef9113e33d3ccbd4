"""Differentiable ops: convolutions, pooling, activations, elementwise.

Layouts are channel-last: images (N, H, W, C), volumes (N, D, H, W, C).
Convolutions loop over kernel taps; each tap is a strided slice times a
(Cin, Cout) matrix, so the heavy lifting is one matmul per tap.  Stride
and padding are explicit everywhere.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, accumulate_grad, make_result


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def _pair(x, w, opname: str):
    _require(x.values.shape == w.values.shape,
             f"{opname}: shape {x.values.shape} vs {w.values.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _pair(a, b, "add")
    out = make_result(a.values + b.values, (a, b))
    if out.requires_grad:
        def _backward():
            accumulate_grad(a, out.grad)
            accumulate_grad(b, out.grad)
        out._backward = _backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _pair(a, b, "sub")
    out = make_result(a.values - b.values, (a, b))
    if out.requires_grad:
        def _backward():
            accumulate_grad(a, out.grad)
            accumulate_grad(b, -out.grad)
        out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _pair(a, b, "mul")
    out = make_result(a.values * b.values, (a, b))
    if out.requires_grad:
        def _backward():
            accumulate_grad(a, out.grad * b.values)
            accumulate_grad(b, out.grad * a.values)
        out._backward = _backward
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    _pair(a, b, "maximum")
    out = make_result(np.maximum(a.values, b.values), (a, b))
    if out.requires_grad:
        def _backward():
            take_a = a.values >= b.values
            accumulate_grad(a, out.grad * take_a)
            accumulate_grad(b, out.grad * ~take_a)
        out._backward = _backward
    return out


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with scalar constants."""
    out = make_result(x.values * scale + shift, (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad * scale)
        out._backward = _backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    return affine(x, factor, 0.0)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    out = make_result(np.maximum(x.values, 0.0), (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad * (x.values > 0))
        out._backward = _backward
    return out


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    vals = np.where(x.values > 0, x.values, alpha * x.values)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad
            # scalar cast keeps the gradient in the working dtype
            a = np.asarray(alpha, dtype=g.dtype)
            accumulate_grad(x, np.where(x.values > 0, g, g * a))
        out._backward = _backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    e = np.exp(-np.abs(v))
    vals = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad * vals * (1.0 - vals))
        out._backward = _backward
    return out


def tanh(x: Tensor) -> Tensor:
    vals = np.tanh(x.values)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad * (1.0 - vals * vals))
        out._backward = _backward
    return out


def exp(x: Tensor) -> Tensor:
    vals = np.exp(x.values)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad * vals)
        out._backward = _backward
    return out


def log(x: Tensor) -> Tensor:
    out = make_result(np.log(x.values), (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad / x.values)
        out._backward = _backward
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient passes only where no clamping happened."""
    vals = np.clip(x.values, lo, hi)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            inside = (x.values >= lo) & (x.values <= hi)
            accumulate_grad(x, out.grad * inside)
        out._backward = _backward
    return out


# ------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    out = make_result(x.values.reshape(shape), (x,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(x, out.grad.reshape(x.values.shape))
        out._backward = _backward
    return out


def concat(tensors: list, axis: int) -> Tensor:
    _require(len(tensors) > 0, "concat: empty input list")
    out = make_result(np.concatenate([t.values for t in tensors], axis=axis),
                      tuple(tensors))
    if out.requires_grad:
        sizes = [t.values.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _backward():
            for t, s0, s1 in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(s0, s1)
                accumulate_grad(t, out.grad[tuple(sl)])
        out._backward = _backward
    return out


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    vals = x.values.sum(axis=axes)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad
            if axes is not None:
                g = np.expand_dims(g, axes)
            accumulate_grad(x, np.broadcast_to(g, x.values.shape).copy())
        out._backward = _backward
    return out


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    count = x.values.size if axes is None else np.prod(
        [x.values.shape[a] for a in np.atleast_1d(axes)])
    return scale(reduce_sum(x, axes), 1.0 / float(count))


# ----------------------------------------------------------------- dense

def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _require(x.values.ndim == 2 and w.values.ndim == 2,
             f"fully_connected: need 2-d input and weights, "
             f"got {x.values.shape} and {w.values.shape}")
    _require(x.values.shape[1] == w.values.shape[0],
             f"fully_connected: shape {x.values.shape} vs {w.values.shape}")
    _require(b.values.shape == (w.values.shape[1],),
             f"fully_connected: bias {b.values.shape} vs weights {w.values.shape}")
    out = make_result(x.values @ w.values + b.values, (x, w, b))
    if out.requires_grad:
        def _backward():
            g = out.grad
            accumulate_grad(x, g @ w.values.T)
            accumulate_grad(w, x.values.T @ g)
            accumulate_grad(b, g.sum(axis=0))
        out._backward = _backward
    return out


# ----------------------------------------------------------- convolutions

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    _require(x.values.ndim == 4 and w.values.ndim == 4,
             f"conv2d: need (N,H,W,C) input and (kh,kw,Ci,Co) weights, "
             f"got {x.values.shape} and {w.values.shape}")
    n, h, wid, ci = x.values.shape
    kh, kw, wci, co = w.values.shape
    _require(ci == wci, f"conv2d: shape {x.values.shape} vs {w.values.shape}")
    _require(b.values.shape == (co,),
             f"conv2d: bias {b.values.shape} vs weights {w.values.shape}")
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (wid + 2 * p - kw) // s + 1
    _require(ho > 0 and wo > 0,
             f"conv2d: kernel {w.values.shape} too large for input {x.values.shape}")
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.values
    vals = np.zeros((n, ho, wo, co), dtype=np.result_type(x.values, w.values))
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s, :]
            vals += sl @ w.values[i, j]
    vals += b.values
    out = make_result(vals, (x, w, b))
    if out.requires_grad:
        def _backward():
            g = out.grad
            if b.requires_grad:
                accumulate_grad(b, g.sum(axis=(0, 1, 2)))
            g2 = g.reshape(-1, co)
            dxp = np.zeros_like(xp) if x.requires_grad else None
            dw = np.zeros_like(w.values) if w.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(i, i + (ho - 1) * s + 1, s),
                          slice(j, j + (wo - 1) * s + 1, s), slice(None))
                    if dw is not None:
                        dw[i, j] = xp[sl].reshape(-1, ci).T @ g2
                    if dxp is not None:
                        dxp[sl] += g @ w.values[i, j].T
            if dxp is not None:
                accumulate_grad(x, dxp[:, p:p + h, p:p + wid, :] if p else dxp)
            if dw is not None:
                accumulate_grad(w, dw)
        out._backward = _backward
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    _require(x.values.ndim == 5 and w.values.ndim == 5,
             f"conv3d: need (N,D,H,W,C) input and (kd,kh,kw,Ci,Co) weights, "
             f"got {x.values.shape} and {w.values.shape}")
    n, d, h, wid, ci = x.values.shape
    kd, kh, kw, wci, co = w.values.shape
    _require(ci == wci, f"conv3d: shape {x.values.shape} vs {w.values.shape}")
    _require(b.values.shape == (co,),
             f"conv3d: bias {b.values.shape} vs weights {w.values.shape}")
    s, p = stride, padding
    do = (d + 2 * p - kd) // s + 1
    ho = (h + 2 * p - kh) // s + 1
    wo = (wid + 2 * p - kw) // s + 1
    _require(do > 0 and ho > 0 and wo > 0,
             f"conv3d: kernel {w.values.shape} too large for input {x.values.shape}")
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.values
    vals = np.zeros((n, do, ho, wo, co), dtype=np.result_type(x.values, w.values))
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                sl = xp[:, i:i + (do - 1) * s + 1:s, j:j + (ho - 1) * s + 1:s,
                        l:l + (wo - 1) * s + 1:s, :]
                vals += sl @ w.values[i, j, l]
    vals += b.values
    out = make_result(vals, (x, w, b))
    if out.requires_grad:
        def _backward():
            g = out.grad
            if b.requires_grad:
                accumulate_grad(b, g.sum(axis=(0, 1, 2, 3)))
            g2 = g.reshape(-1, co)
            dxp = np.zeros_like(xp) if x.requires_grad else None
            dw = np.zeros_like(w.values) if w.requires_grad else None
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        sl = (slice(None), slice(i, i + (do - 1) * s + 1, s),
                              slice(j, j + (ho - 1) * s + 1, s),
                              slice(l, l + (wo - 1) * s + 1, s), slice(None))
                        if dw is not None:
                            dw[i, j, l] = xp[sl].reshape(-1, ci).T @ g2
                        if dxp is not None:
                            dxp[sl] += g @ w.values[i, j, l].T
            if dxp is not None:
                accumulate_grad(x, dxp[:, p:p + d, p:p + h, p:p + wid, :] if p else dxp)
            if dw is not None:
                accumulate_grad(w, dw)
        out._backward = _backward
    return out


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int,
                      padding: int) -> Tensor:
    """Gradient-of-conv upsampling; output extent = (in-1)*stride + k - 2*pad."""
    _require(x.values.ndim == 5 and w.values.ndim == 5,
             f"transposed_conv3d: need (N,D,H,W,C) input and (kd,kh,kw,Ci,Co) "
             f"weights, got {x.values.shape} and {w.values.shape}")
    n, d, h, wid, ci = x.values.shape
    kd, kh, kw, wci, co = w.values.shape
    _require(ci == wci,
             f"transposed_conv3d: shape {x.values.shape} vs {w.values.shape}")
    _require(b.values.shape == (co,),
             f"transposed_conv3d: bias {b.values.shape} vs weights {w.values.shape}")
    s, p = stride, padding
    df, hf, wf = (d - 1) * s + kd, (h - 1) * s + kh, (wid - 1) * s + kw
    do, ho, wo = df - 2 * p, hf - 2 * p, wf - 2 * p
    _require(do > 0 and ho > 0 and wo > 0,
             f"transposed_conv3d: padding {p} swallows output for input "
             f"{x.values.shape}")
    full = np.zeros((n, df, hf, wf, co), dtype=np.result_type(x.values, w.values))
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                full[:, i:i + (d - 1) * s + 1:s, j:j + (h - 1) * s + 1:s,
                     l:l + (wid - 1) * s + 1:s, :] += x.values @ w.values[i, j, l]
    vals = full[:, p:p + do, p:p + ho, p:p + wo, :] + b.values
    out = make_result(vals, (x, w, b))
    if out.requires_grad:
        def _backward():
            g = out.grad
            if b.requires_grad:
                accumulate_grad(b, g.sum(axis=(0, 1, 2, 3)))
            gfull = np.zeros((n, df, hf, wf, co), dtype=g.dtype)
            gfull[:, p:p + do, p:p + ho, p:p + wo, :] = g
            dx = np.zeros_like(x.values) if x.requires_grad else None
            dw = np.zeros_like(w.values) if w.requires_grad else None
            x2 = x.values.reshape(-1, ci) if w.requires_grad else None
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        sl = gfull[:, i:i + (d - 1) * s + 1:s,
                                   j:j + (h - 1) * s + 1:s,
                                   l:l + (wid - 1) * s + 1:s, :]
                        if dx is not None:
                            dx += sl @ w.values[i, j, l].T
                        if dw is not None:
                            dw[i, j, l] = x2.T @ sl.reshape(-1, co)
            if dx is not None:
                accumulate_grad(x, dx)
            if dw is not None:
                accumulate_grad(w, dw)
        out._backward = _backward
    return out


# ----------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, size: int, stride: int, padding: int = 0) -> Tensor:
    _require(x.values.ndim == 4,
             f"max_pool2d: need (N,H,W,C), got {x.values.shape}")
    n, h, wid, c = x.values.shape
    s, p = stride, padding
    if p:
        xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x.values
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - size) // s + 1
    wo = (wp - size) // s + 1
    _require(ho > 0 and wo > 0,
             f"max_pool2d: window {size} too large for input {x.values.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (size, size), axis=(1, 2))
    win = win[:, ::s, ::s][:, :ho, :wo]            # (N,Ho,Wo,C,size,size)
    flat = win.reshape(n, ho, wo, c, size * size)
    idx = flat.argmax(axis=4)
    vals = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad
            dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            ni, hi, wi, ci_ = np.ogrid[:n, :ho, :wo, :c]
            rows = hi * s + idx // size
            cols = wi * s + idx % size
            np.add.at(dxp, (np.broadcast_to(ni, idx.shape), rows, cols,
                            np.broadcast_to(ci_, idx.shape)), g)
            accumulate_grad(x, dxp[:, p:p + h, p:p + wid, :] if p else dxp)
        out._backward = _backward
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: (N, ..., C) -> (N, C)."""
    _require(x.values.ndim >= 3,
             f"global_avg_pool: need spatial axes, got {x.values.shape}")
    spatial = tuple(range(1, x.values.ndim - 1))
    return reduce_mean(x, spatial)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of (N, H, W, C)."""
    _require(x.values.ndim == 4,
             f"upsample2d: need (N,H,W,C), got {x.values.shape}")
    n, h, w, c = x.values.shape
    f = factor
    vals = x.values.repeat(f, axis=1).repeat(f, axis=2)
    out = make_result(vals, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(n, h, f, w, f, c).sum(axis=(2, 4))
            accumulate_grad(x, g)
        out._backward = _backward
    return out


# -------------------------------------------------------------- layer norm

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    c = x.values.shape[-1]
    _require(gain.values.shape == (c,) and bias.values.shape == (c,),
             f"layer_norm: gain/bias {gain.values.shape}/{bias.values.shape} "
             f"vs channels {c}")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = make_result(xhat * gain.values + bias.values, (x, gain, bias))
    if out.requires_grad:
        def _backward():
            g = out.grad
            if bias.requires_grad:
                accumulate_grad(bias, g.reshape(-1, c).sum(axis=0))
            if gain.requires_grad:
                accumulate_grad(gain, (g * xhat).reshape(-1, c).sum(axis=0))
            if x.requires_grad:
                gh = g * gain.values
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                accumulate_grad(x, inv * (gh - m1 - xhat * m2))
        out._backward = _backward
    return out


# ----------------------------------------------------------------- losses

def binary_cross_entropy(pred: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Summed -[y log p + (1-y) log(1-p)] over every element.

    Predictions are clamped to [eps, 1-eps]; where the clamp is active the
    gradient is zero, matching clip().  target is a constant binary array.
    This is the differentiable twin of the voxel-grid reference loss.
    """
    y = np.asarray(target)
    _require(y.shape == pred.values.shape,
             f"binary_cross_entropy: prediction {pred.values.shape} vs "
             f"target {y.shape}")
    _require(bool(np.all((y == 0.0) | (y == 1.0))),
             "binary_cross_entropy: target must be binary")
    y = y.astype(pred.values.dtype)
    p = np.clip(pred.values, eps, 1.0 - eps)
    vals = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out = make_result(np.asarray(vals.sum()), (pred,))
    if out.requires_grad:
        def _backward():
            inside = (pred.values >= eps) & (pred.values <= 1.0 - eps)
            accumulate_grad(pred,
                            out.grad * inside * ((1.0 - y) / (1.0 - p) - y / p))
        out._backward = _backward
    return out


def l2_loss(pred: Tensor, target) -> Tensor:
    """Summed squared error against a constant target array."""
    y = np.asarray(target, dtype=pred.values.dtype)
    _require(y.shape == pred.values.shape,
             f"l2_loss: prediction {pred.values.shape} vs target {y.shape}")
    diff = pred.values - y
    out = make_result(np.asarray((diff * diff).sum()), (pred,))
    if out.requires_grad:
        def _backward():
            accumulate_grad(pred, out.grad * 2.0 * diff)
        out._backward = _backward
    return out


def gaussian_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    _require(mu.values.shape == log_var.values.shape,
             f"gaussian_kl: mu {mu.values.shape} vs log_var {log_var.values.shape}")
    var = np.exp(log_var.values)
    vals = 0.5 * (mu.values * mu.values + var - 1.0 - log_var.values)
    out = make_result(np.asarray(vals.sum()), (mu, log_var))
    if out.requires_grad:
        def _backward():
            accumulate_grad(mu, out.grad * mu.values)
            accumulate_grad(log_var, out.grad * 0.5 * (var - 1.0))
        out._backward = _backward
    return out


# ----------------------------------------------------------- initialization

def he_normal(rng: np.random.Generator, shape, fan_in: int,
              dtype=np.float32) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
