"""Windowed SSIM, the std-gated source selection, and the fusion training loss.

All statistics are computed over uniform square windows that lie fully inside
the image and slide with stride 1, so an H x W image has (H-k+1)(W-k+1)
windows for a k x k window. Variances and covariances are population
(divide by k*k) moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op

C1 = 1e-4
C2 = 9e-4
WINDOW = 7


@dataclass(frozen=True)
class SsimConstants:
    c1: float = C1
    c2: float = C2
    window: int = WINDOW

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilising constants must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")


DEFAULT = SsimConstants()


@dataclass
class WindowStats:
    """Per-window moments of an image pair; arrays shaped (..., H-k+1, W-k+1)."""

    mean_x: np.ndarray
    mean_y: np.ndarray
    var_x: np.ndarray
    var_y: np.ndarray
    cov: np.ndarray

    @property
    def count(self) -> int:
        return int(np.prod(self.mean_x.shape[-2:]))


def box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window fully inside the last two axes (separable running sums)."""
    c = np.cumsum(a, axis=-2)
    pad = np.zeros_like(c[..., :1, :])
    c = np.concatenate([pad, c], axis=-2)
    rows = c[..., k:, :] - c[..., :-k, :]
    c = np.cumsum(rows, axis=-1)
    pad = np.zeros_like(c[..., :, :1])
    c = np.concatenate([pad, c], axis=-1)
    return c[..., :, k:] - c[..., :, :-k]


def box_sum_adjoint(g: np.ndarray, k: int) -> np.ndarray:
    """Transpose of :func:`box_sum`: spread each window value back over its k x k pixels."""
    pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return box_sum(np.pad(g, pad), k)


def _check_window(shape, k: int) -> None:
    h, w = shape[-2:]
    if h < k or w < k:
        raise ValueError(f"image of size {h}x{w} is smaller than the {k}x{k} window")


def local_moments(x: np.ndarray, k: int = WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Window means and (clamped) population variances of a single image."""
    x = np.asarray(x, dtype=np.float64)
    _check_window(x.shape, k)
    n = k * k
    mu = box_sum(x, k) / n
    var = np.maximum(box_sum(x * x, k) / n - mu * mu, 0.0)
    return mu, var


def window_stats(x, y, k: SsimConstants = DEFAULT) -> WindowStats:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"window_stats: shape mismatch {x.shape} vs {y.shape}")
    mx, vx = local_moments(x, k.window)
    my, vy = local_moments(y, k.window)
    n = k.window ** 2
    cov = box_sum(x * y, k.window) / n - mx * my
    return WindowStats(mx, my, vx, vy, cov)


def ssim_per_window(s: WindowStats, k: SsimConstants = DEFAULT) -> np.ndarray:
    num = (2 * s.mean_x * s.mean_y + k.c1) * (2 * s.cov + k.c2)
    den = (s.mean_x ** 2 + s.mean_y ** 2 + k.c1) * (s.var_x + s.var_y + k.c2)
    return num / den


def ssim_map(x, y, k: SsimConstants = DEFAULT) -> np.ndarray:
    return ssim_per_window(window_stats(x, y, k), k)


def mean_ssim(x, y, k: SsimConstants = DEFAULT) -> float:
    """Global SSIM: average of the per-window values over the whole image."""
    return float(ssim_map(x, y, k).mean())


def selection_mask(x1, x2, k: SsimConstants = DEFAULT) -> np.ndarray:
    """True where x1's window std is >= x2's (x1 wins ties), per window."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"source images differ in size: {x1.shape} vs {x2.shape}")
    _, v1 = local_moments(x1, k.window)
    _, v2 = local_moments(x2, k.window)
    return np.sqrt(v1) >= np.sqrt(v2)


def scope(x1, x2, yhat, k: SsimConstants = DEFAULT) -> np.ndarray:
    """Per-window SSIM of ``yhat`` against whichever source is locally sharper."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if not x1.shape == x2.shape == yhat.shape:
        raise ValueError(f"scope: size mismatch {x1.shape}, {x2.shape}, {yhat.shape}")
    pick1 = selection_mask(x1, x2, k)
    s1 = ssim_map(x1, yhat, k)
    s2 = ssim_map(x2, yhat, k)
    return np.where(pick1, s1, s2)


def scope_score(x1, x2, yhat, k: SsimConstants = DEFAULT) -> float:
    return float(scope(x1, x2, yhat, k).mean())


def _loss_and_grad(x1: np.ndarray, x2: np.ndarray, y: np.ndarray, k: SsimConstants):
    """Batch-mean loss and its gradient w.r.t. y. Arrays shaped (B, H, W)."""
    win = k.window
    n = win * win
    pick1 = selection_mask(x1, x2, k)
    xs_mu1, xs_v1 = local_moments(x1, win)
    xs_mu2, xs_v2 = local_moments(x2, win)
    mx = np.where(pick1, xs_mu1, xs_mu2)
    vx = np.where(pick1, xs_v1, xs_v2)
    my, vy = local_moments(y, win)
    cov = np.where(pick1, box_sum(x1 * y, win), box_sum(x2 * y, win)) / n - mx * my

    a1 = 2 * mx * my + k.c1
    a2 = 2 * cov + k.c2
    b1 = mx ** 2 + my ** 2 + k.c1
    b2 = vx + vy + k.c2
    s = a1 * a2 / (b1 * b2)

    batch = y.shape[0]
    windows = s.shape[-1] * s.shape[-2]
    loss = 1.0 - s.mean()

    d_my = 2 * mx * a2 / (b1 * b2) - s * 2 * my / b1
    d_vy = -s / b2
    d_cov = 2 * a1 / (b1 * b2)
    gs = -1.0 / (batch * windows)
    # chain through my = S(y)/n, vy = S(y^2)/n - my^2, cov = S(x y)/n - mx my
    t_const = gs * (d_my - 2 * my * d_vy - mx * d_cov) / n
    t_y = gs * 2 * d_vy / n
    t_x = gs * d_cov / n
    grad = (
        box_sum_adjoint(t_const, win)
        + y * box_sum_adjoint(t_y, win)
        + x1 * box_sum_adjoint(np.where(pick1, t_x, 0.0), win)
        + x2 * box_sum_adjoint(np.where(pick1, 0.0, t_x), win)
    )
    return loss, grad


def fusion_loss(x1, x2, yhat: Tensor, k: SsimConstants = DEFAULT) -> Tensor:
    """``1 - mean Scope`` averaged over the batch, differentiable w.r.t. ``yhat`` only.

    ``x1``/``x2`` may be arrays or tensors shaped like ``yhat`` (N, 1, H, W) and are
    treated as constants.
    """
    a = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=np.float64)
    b = np.asarray(x2.data if isinstance(x2, Tensor) else x2, dtype=np.float64)
    if not a.shape == b.shape == yhat.shape:
        raise ValueError(f"fusion_loss: size mismatch {a.shape}, {b.shape}, {yhat.shape}")
    if yhat.shape[1] != 1:
        raise ValueError("fusion_loss works on single-channel images")
    _check_window(a.shape, k.window)
    y = yhat.data.astype(np.float64)[:, 0]
    loss, grad = _loss_and_grad(a[:, 0], b[:, 0], y, k)
    grad = grad[:, None].astype(yhat.dtype)

    def back(g):
        return (grad * float(g.reshape(())),)

    return custom_op(np.full((1, 1, 1, 1), loss, dtype=np.float64), (yhat,), back, "fusion_loss")
