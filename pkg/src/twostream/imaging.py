"""Array-level image helpers shared by preprocessing and optical flow.

All functions accept arbitrary leading batch axes: images are ``(..., H, W)``.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` interpolation matrix, half-pixel centres, edge-clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the trailing (H, W) axes to ``size`` with bilinear interpolation."""
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[-1] == 0 or image.shape[-2] == 0:
        raise ValueError(f"cannot resize an empty image of shape {image.shape}")
    h, w = image.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return image.copy()
    wy = bilinear_weights(h, oh)
    wx = bilinear_weights(w, ow)
    out = wy @ image.astype(np.float64) @ wx.T
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def correlate1d(arr: np.ndarray, kernel: np.ndarray, axis: int, mode: str = "constant") -> np.ndarray:
    """Centred 1-D correlation along ``axis``; ``mode`` is 'constant' (zeros) or 'nearest'."""
    arr = np.asarray(arr, dtype=np.float64)
    return ndimage.correlate1d(arr, np.asarray(kernel, dtype=np.float64), axis=axis,
                               mode=mode, cval=0.0)


def separable(arr: np.ndarray, ky: np.ndarray, kx: np.ndarray, mode: str = "constant") -> np.ndarray:
    return correlate1d(correlate1d(arr, ky, -2, mode), kx, -1, mode)


def sample_bilinear(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``field`` of shape (N, H, W, K) at per-pixel coordinates (N, H, W).

    Coordinates are clamped to the image, so lookups never leave the grid.
    """
    n, h, w = xs.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xs, np.intp)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros_like(ys, np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    flat = field.reshape(n * h * w, -1)
    base = (np.arange(n) * (h * w))[:, None, None]
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    top = flat[i00] * (1 - fx) + flat[i01] * fx
    bottom = flat[i10] * (1 - fx) + flat[i11] * fx
    return top * (1 - fy) + bottom * fy
