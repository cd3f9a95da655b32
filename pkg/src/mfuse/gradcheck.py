"""Central finite-difference checks of every differentiable operation.

Each check draws a random instance, projects the op's output onto a random
direction so all output positions contribute with distinct weights, and
compares analytic input gradients with central differences in float64.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .ssim import fusion_loss
from .tensor import ConvParams, Tensor

EPS = 1e-3
TOLERANCE = 1e-3
# denominators below this are treated as this (both gradients essentially zero)
_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _FLOOR)
    return np.abs(analytic - numeric) / den


def _project(out: Tensor, direction: np.ndarray) -> Tensor:
    """Scalar <out, direction>, recorded in the graph."""
    value = np.full((1, 1, 1, 1), float((out.data * direction).sum()))

    def back(g):
        return (direction * float(g.reshape(())),)

    return T.custom_op(value, (out,), back, "project")


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + eps
        up = f()
        arr[idx] = orig - eps
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def _away_from_zero(rng, shape, gap):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * (gap + np.abs(x)), x)


def _instance(op: str, rng: np.random.Generator):
    """(leaf arrays, scalar builder) for one random instance of ``op``."""
    if op == "conv2d":
        cin, cout = rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 7, size=2)
        arrays = [rng.standard_normal((1, cin, h, w)), rng.standard_normal((cout, cin, 3, 3)),
                  rng.standard_normal((1, 1, 1, cout))]
        build = lambda x, wt, b: T.conv2d(x, ConvParams(wt, b))
    elif op == "leaky_relu":
        arrays = [_away_from_zero(rng, (2, 2, 4, 4), 10 * EPS)]
        build = lambda x: T.leaky_relu(x, 0.2)
    elif op == "sigmoid":
        arrays = [rng.uniform(-4, 4, (2, 2, 4, 4))]
        build = T.sigmoid
    elif op == "add":
        arrays = [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 2, 4, 4))]
        build = T.add
    elif op == "scale":
        k = float(rng.uniform(-3, 3))
        arrays = [rng.standard_normal((2, 2, 4, 4))]
        build = lambda x: T.scale(x, k)
    elif op == "mean_all":
        arrays = [rng.standard_normal((2, 2, 4, 4))]
        build = T.mean_all
    elif op == "fusion_loss":
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(9, 12)), int(rng.integers(9, 12)))
        x1, x2 = rng.random(shape), rng.random(shape)
        arrays = [rng.random(shape)]
        build = lambda y: fusion_loss(x1, x2, y)
    else:
        raise KeyError(f"no gradient check defined for {op!r}")
    direction = None

    def scalar(*tensors):
        nonlocal direction
        out = build(*tensors)
        if out.data.size == 1:
            return out
        if direction is None:
            direction = rng.standard_normal(out.shape)
        return _project(out, direction)

    return arrays, scalar


OPS = ("conv2d", "leaky_relu", "sigmoid", "add", "scale", "mean_all", "fusion_loss")


def check_op(op: str, rng: np.random.Generator, instances: int = 20,
             corrupt: bool = False) -> float:
    """Largest elementwise relative error over ``instances`` random cases."""
    worst = 0.0
    for _ in range(instances):
        arrays, scalar = _instance(op, rng)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = scalar(*leaves)
        T.backward(loss)
        for leaf, arr in zip(leaves, arrays):
            analytic = leaf.grad * (1.01 if corrupt else 1.0)

            def f():
                return scalar(*[Tensor(a) for a in arrays]).item()

            numeric = numeric_grad(f, arr)
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def run(seed: int = 0, instances: int = 20, corrupt: Optional[str] = None) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {op: check_op(op, rng, instances, corrupt == op) for op in OPS}
