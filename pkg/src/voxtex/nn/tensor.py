"""Reverse-mode autodiff over numpy arrays.

Tensors carry values, an optional gradient of the same shape, and a
backward closure linking them to the tensors they were computed from.
Training runs in float32; gradient checks build the same graphs in
float64, where central differences at h=1e-4 are meaningful.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True
_DEBUG_FINITE = True


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_checks(enabled: bool) -> bool:
    """Toggle the per-op finiteness assertion; returns the previous value."""
    global _DEBUG_FINITE
    prev = _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)
    return prev


def debug_checks_enabled() -> bool:
    return _DEBUG_FINITE


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_backward", "_children")

    def __init__(self, values, requires_grad: bool = False):
        vals = np.asarray(values)
        if vals.dtype not in (np.float32, np.float64):
            vals = vals.astype(np.float64)
        self.values = vals
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._children = ()

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Backpropagate from this tensor.

        Without a seed the tensor must be a scalar (the loss); with one,
        the seed is dL/dself and must match this tensor's shape.
        """
        if seed is None:
            if self.values.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=self.values.dtype)
            if seed.shape != self.values.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match tensor shape {self.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if id(child) not in visited:
                    stack.append((child, False))
        accumulate_grad(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def make_result(values: np.ndarray, children: tuple) -> Tensor:
    """Wrap an op result, wiring the graph unless grads are off.

    The op attaches its backward closure to ._backward afterwards when
    .requires_grad came out True.
    """
    if _DEBUG_FINITE and not np.isfinite(values).all():
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor(values)
    if _GRAD_ENABLED and any(c.requires_grad for c in children):
        out.requires_grad = True
        out._children = tuple(children)
    return out


def parameter(values, dtype=np.float32) -> Tensor:
    """A trainable tensor (requires_grad set, values cast to dtype)."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)
