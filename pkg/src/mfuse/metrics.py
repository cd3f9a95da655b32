"""Fusion quality metrics and synthetic multi-focus test data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ssim import DEFAULT, SsimConstants, box_sum, local_moments, mean_ssim, scope_score

# variance sums below this are treated as exactly flat
_FLAT = 1e-12


@dataclass
class MetricReport:
    q_s: float
    en: float
    ssim1: float
    ssim2: float
    scope: float

    def row(self) -> tuple[float, ...]:
        return (self.q_s, self.en, self.ssim1, self.ssim2, self.scope)


def entropy(img: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy (bits) of the image quantised to ``bins`` levels over [0, 1]."""
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * (bins - 1)), 0, bins - 1)
    counts = np.bincount(q.astype(np.int64).ravel(), minlength=bins)
    p = counts[counts > 0] / q.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def quality_index(mu_a, mu_b, var_a, var_b, cov) -> np.ndarray:
    """Universal image quality index per window, with flat-window conventions.

    When both windows are flat the structure/contrast factor is taken as 1;
    when both means are zero the luminance factor is taken as 1.
    """
    lum_den = mu_a ** 2 + mu_b ** 2
    str_den = var_a + var_b
    lum_flat = lum_den < _FLAT
    str_flat = str_den < _FLAT
    lum = np.where(lum_flat, 1.0, 2 * mu_a * mu_b / np.where(lum_flat, 1.0, lum_den))
    stru = np.where(str_flat, 1.0, 2 * cov / np.where(str_flat, 1.0, str_den))
    return lum * stru


def _pair_moments(a, b, k: int):
    mu_a, var_a = local_moments(a, k)
    mu_b, var_b = local_moments(b, k)
    cov = box_sum(a * b, k) / (k * k) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def q_s_map(x1, x2, f, k: SsimConstants = DEFAULT) -> np.ndarray:
    x1, x2, f = (np.asarray(a, dtype=np.float64) for a in (x1, x2, f))
    if not x1.shape == x2.shape == f.shape:
        raise ValueError(f"q_s: size mismatch {x1.shape}, {x2.shape}, {f.shape}")
    m1, mf, v1, vf, c1f = _pair_moments(x1, f, k.window)
    m2, _, v2, _, c2f = _pair_moments(x2, f, k.window)
    total = v1 + v2
    flat = total < _FLAT
    lam = np.where(flat, 0.5, v1 / np.where(flat, 1.0, total))
    return lam * quality_index(m1, mf, v1, vf, c1f) + (1 - lam) * quality_index(m2, mf, v2, vf, c2f)


def q_s(x1, x2, f, k: SsimConstants = DEFAULT) -> float:
    """Saliency-weighted fusion quality (variance as saliency), averaged over windows."""
    return float(q_s_map(x1, x2, f, k).mean())


def local_std_same(img: np.ndarray, k: int = 7) -> np.ndarray:
    """Per-pixel std over a centred k x k window (reflected borders); output matches input size."""
    img = np.asarray(img, dtype=np.float64)
    r = k // 2
    mu, var = local_moments(np.pad(img, r, mode="reflect"), k)
    return np.sqrt(var)


def select_fuse(x1: np.ndarray, x2: np.ndarray, k: int = 7) -> np.ndarray:
    """Naive baseline: per pixel, copy the source with the larger local std (x1 on ties)."""
    return np.where(local_std_same(x1, k) >= local_std_same(x2, k), x1, x2)


def average_fuse(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return (np.asarray(x1, dtype=np.float64) + np.asarray(x2, dtype=np.float64)) / 2


def evaluate(x1, x2, f, k: SsimConstants = DEFAULT) -> MetricReport:
    return MetricReport(
        q_s=q_s(x1, x2, f, k),
        en=entropy(f),
        ssim1=mean_ssim(x1, f, k),
        ssim2=mean_ssim(x2, f, k),
        scope=scope_score(x1, x2, f, k),
    )


REPORT_HEADER = "pair  QS  EN  SSIM1  SSIM2  Scope"


def format_report(rows: list[tuple[str, MetricReport]], with_mean: bool = True) -> str:
    lines = [REPORT_HEADER]
    for name, r in rows:
        lines.append("  ".join([name] + [f"{v:.4f}" for v in r.row()]))
    if with_mean and rows:
        mean = np.mean([r.row() for _, r in rows], axis=0)
        lines.append("  ".join(["mean"] + [f"{v:.4f}" for v in mean]))
    return "\n".join(lines) + "\n"


# -- synthetic data ----------------------------------------------------------

def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur, kernel truncated at 3 sigma, reflected borders."""
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="reflect", truncate=3.0)


def synth_pair(sharp: np.ndarray, mask: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Two partially defocused copies of ``sharp``.

    ``p1`` is blurred where ``mask`` is set, ``p2`` where it is not, so every
    pixel is in focus in exactly one of them.
    """
    sharp = np.asarray(sharp, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != sharp.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {sharp.shape}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    soft = blur(sharp, sigma)
    return np.where(mask, soft, sharp), np.where(mask, sharp, soft)


def half_plane_mask(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Straight focus boundary through a random point near the centre, random angle."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy = h * rng.uniform(0.35, 0.65)
    cx = w * rng.uniform(0.35, 0.65)
    theta = rng.uniform(0, 2 * np.pi)
    return (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta) > 0


def blob_mask(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth random region covering roughly half the image."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), min(shape) / 6, mode="wrap")
    return field > np.median(field)


def synth_scene(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Textured test image: piecewise-constant shapes plus fine texture, in [0, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.full(shape, rng.uniform(0.3, 0.7))
    for _ in range(rng.integers(6, 12)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.08, 0.3) * min(h, w)
        if rng.random() < 0.5:
            region = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            region = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.4, 1.6))
        img[region] = rng.uniform(0.1, 0.9)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 0.8)
    texture /= texture.std() + 1e-12
    img = img + 0.08 * texture
    return np.clip(img, 0.0, 1.0)


def make_synthetic_set(n: int, shape=(128, 128), sigma: float = 2.0, seed: int = 0):
    """``n`` (sharp, p1, p2) triples from random scenes and random focus boundaries."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        sharp = synth_scene(shape, rng)
        mask = half_plane_mask(shape, rng) if rng.random() < 0.5 else blob_mask(shape, rng)
        p1, p2 = synth_pair(sharp, mask, sigma)
        out.append((sharp, p1, p2))
    return out
