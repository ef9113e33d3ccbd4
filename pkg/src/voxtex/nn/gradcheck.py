"""Central-difference gradient checking for the layer set."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_gradient(f, tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """d f() / d tensor by central differences, one element at a time.

    f must rebuild its forward pass from tensor.values on every call and
    return a python float or 0-d array.
    """
    base = tensor.values
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = float(f())
        flat[i] = keep - h
        lo = float(f())
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-2) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps vanishing
    gradients from inflating the ratio."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(build, tensors: dict, h: float = 1e-4) -> float:
    """Worst relative error across all given tensors.

    build() runs the forward pass from current tensor values and returns
    the scalar loss Tensor.  tensors maps names to float64 leaf Tensors
    with requires_grad set.
    """
    for t in tensors.values():
        if t.values.dtype != np.float64:
            raise ValueError("gradient checks need float64 tensors")
        t.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        if t.grad is None:
            raise AssertionError(f"no gradient reached {name!r}")
        numeric = numeric_gradient(lambda: build().values, t, h)
        err = max_relative_error(t.grad, numeric)
        worst = max(worst, err)
    return worst
