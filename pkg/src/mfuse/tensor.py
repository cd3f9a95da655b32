"""Small dense-tensor layer with define-by-run reverse-mode differentiation.

Only the handful of operations the fusion network and its loss need are
provided. Every tensor is 4-D (N, C, H, W); scalars produced by reductions
are stored with shape (1, 1, 1, 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A 4-D array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor data must be 4-D (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op}: input contains NaN or Inf")


@dataclass
class ConvParams:
    """3x3 convolution weights (out, in, 3, 3) and bias (out,)."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        w = self.weight.shape
        if w[2:] != (3, 3):
            raise ValueError(f"convolution kernels must be 3x3, got {w[2:]}")
        if self.bias.data.size != w[0]:
            raise ValueError(f"bias has {self.bias.data.size} entries for {w[0]} output channels")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*W) patches of the zero-padded input, rows ordered (c, dy, dx)."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, n * h * w)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 3x3 correlation. x: (N, C, H, W), w: (O, C, 3, 3)."""
    n, _, h, wd = x.shape
    cols = _im2col(x)
    out = w.reshape(w.shape[0], -1).astype(cols.dtype, copy=False) @ cols
    return out.reshape(-1, n, h, wd).transpose(1, 0, 2, 3)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    w, b = params.weight, params.bias
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but the kernel expects {w.shape[1]}"
        )
    _check_finite(x.data, "conv2d")
    out = _conv_same(x.data, w.data) + b.data.reshape(1, -1, 1, 1)

    def back(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            # adjoint of same-padded correlation: flip spatially, swap in/out
            gx = _conv_same(g, w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if w.requires_grad:
            g2 = g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)
            # patches rebuilt here rather than kept alive between passes
            gw = (g2 @ _im2col(x.data).T).reshape(w.shape).astype(w.dtype, copy=False)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
        return gx, gw, gb

    return _result(out, (x, w, b), back, "conv2d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    _check_finite(x.data, "leaky_relu")
    neg = x.data < 0
    out = np.where(neg, x.data * slope, x.data)

    def back(g):
        return (np.where(neg, g * slope, g),)

    return _result(out, (x,), back, "leaky_relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the result strictly inside (0, 1) once exp saturates
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x.data, "sigmoid")
    s = _stable_sigmoid(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), back, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        return g, g

    return _result(a.data + b.data, (a, b), back, "add")


def scale(a: Tensor, k: float) -> Tensor:
    def back(g):
        return (g * k,)

    return _result(a.data * k, (a,), back, "scale")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        return (np.full(a.shape, g.reshape(()) / n, dtype=a.dtype),)

    return _result(a.data.mean().reshape(1, 1, 1, 1), (a,), back, "mean_all")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad.

    Leaf gradients add onto whatever is already stored, so callers reset them
    between optimisation steps (see :func:`zero_grad`).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def custom_op(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    """Record an operation whose forward value and vector-Jacobian product are supplied."""
    return _result(data, parents, fn, op)
