"""PNG / PGM / PPM reading and writing, plus luminance/chroma conversion.

Images are handled as float arrays in [0, 1]: (H, W) for gray, (H, W, 3) for RGB.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

EXTENSIONS = (".png", ".pgm", ".ppm")

# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in EXTENSIONS:
        raise ValueError(f"{path}: unsupported image type (expected png, pgm or ppm)")
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
        return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write an 8-bit gray or RGB image; the format follows the file extension."""
    path = Path(path)
    if path.suffix.lower() not in EXTENSIONS:
        raise ValueError(f"{path}: unsupported image type (expected png, pgm or ppm)")
    arr = to_uint8(img)
    if path.suffix.lower() == ".pgm" and arr.ndim == 3:
        arr = to_uint8(luminance(img))
    if path.suffix.lower() == ".ppm" and arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray(arr).save(path)


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA


def rgb_to_ycbcr(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 YCbCr with chroma centred on 0.5."""
    y = luminance(rgb)
    cb = 0.5 + (rgb[..., 2] - y) / 1.772
    cr = 0.5 + (rgb[..., 0] - y) / 1.402
    return y, cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    r = y + 1.402 * (cr - 0.5)
    b = y + 1.772 * (cb - 0.5)
    g = (y - LUMA[0] * r - LUMA[2] * b) / LUMA[1]
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)
