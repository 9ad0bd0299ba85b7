"""Dense two-frame optical flow by polynomial expansion (Farnebäck).

Every pixel neighbourhood is approximated by a quadratic
``f(p) ~ p^T A p + b^T p + c`` fitted by Gaussian-weighted least squares.
For a displaced frame the quadratic coefficients shift predictably, which
gives a per-pixel linear system for the displacement; those systems are
averaged over a window and solved, coarse to fine over an image pyramid.

Coordinates: ``x`` runs along columns, ``y`` along rows, and a flow vector
``(u, v)`` moves content from ``(x, y)`` in the first frame to
``(x + u, y + v)`` in the second.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .imaging import correlate1d, gaussian_kernel, resize_bilinear, sample_bilinear


@dataclass(frozen=True)
class PolyExpansion:
    A: np.ndarray  # (..., H, W, 2, 2), symmetric
    b: np.ndarray  # (..., H, W, 2)
    c: np.ndarray  # (..., H, W)


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    pyr_scale: float = 0.5
    iterations: int = 3
    n: int = 7
    sigma: float = 1.5
    window: int = 9
    window_sigma: float = 2.0
    min_size: int = 8
    regularization: float = 1e-3


# basis order: 1, x, y, x^2, y^2, xy
_POWERS = ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1))
# confidence of the outermost pixel rows and columns, edge first
_BORDER = np.array([0.14, 0.14, 0.4472, 0.8, 1.0])


def _applicability(n: int, sigma: float):
    if n < 3 or n % 2 == 0:
        raise ValueError(f"neighbourhood size must be odd and >= 3, got {n}")
    r = n // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return x, g


@functools.lru_cache(maxsize=32)
def _inverse_gram(h: int, w: int, n: int, sigma: float) -> np.ndarray:
    """Per-pixel inverse of the weighted normal matrix.

    Certainty is 1 inside the image and 0 outside, so border pixels get their
    own (smaller-support) fit instead of padding-based guesses.
    """
    x, g = _applicability(n, sigma)
    ones = np.ones((h, w))
    moments = {}
    for i in range(5):
        for j in range(5 - i):
            moments[i, j] = correlate1d(correlate1d(ones, g * x**j, 0), g * x**i, 1)
    gram = np.empty((h, w, 6, 6))
    for a, (ia, ja) in enumerate(_POWERS):
        for b, (ib, jb) in enumerate(_POWERS):
            gram[..., a, b] = moments[ia + ib, ja + jb]
    inv = np.linalg.inv(gram)
    inv.flags.writeable = False
    return inv


def poly_expand(image: np.ndarray, n: int = 7, sigma: float = 1.5) -> PolyExpansion:
    """Quadratic fit of every pixel neighbourhood of ``image`` (..., H, W)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 2:
        raise ValueError(f"poly_expand needs an image, got shape {img.shape}")
    h, w = img.shape[-2:]
    x, g = _applicability(n, sigma)
    # projections onto each basis function, separable in (row, column)
    by_row = {j: correlate1d(img, g * x**j, -2) for j in range(3)}
    proj = np.stack([correlate1d(by_row[j], g * x**i, -1) for i, j in _POWERS], axis=-1)
    coef = (_inverse_gram(h, w, n, float(sigma)) @ proj[..., None])[..., 0]
    c0, bx, by, axx, ayy, axy = np.moveaxis(coef, -1, 0)
    A = np.stack([np.stack([axx, axy / 2], -1), np.stack([axy / 2, ayy], -1)], -2)
    b = np.stack([bx, by], -1)
    return PolyExpansion(A=A, b=b, c=c0)


def _smooth(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # arr is (N, H, W, K); smooth over H and W
    return correlate1d(correlate1d(arr, kernel, 1, "nearest"), kernel, 2, "nearest")


def _border_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    k = min(len(_BORDER), (n + 1) // 2)
    w[:k] = _BORDER[:k]
    w[n - k:] = np.minimum(w[n - k:], _BORDER[:k][::-1])
    return w


def _update(r1: PolyExpansion, r2: PolyExpansion, d: np.ndarray, kernel: np.ndarray,
            regularization: float) -> np.ndarray:
    n, h, w = d.shape[:3]
    rows, cols = np.mgrid[0:h, 0:w]
    xs = cols[None] + d[..., 0]
    ys = rows[None] + d[..., 1]
    packed = np.concatenate([r2.A.reshape(n, h, w, 4), r2.b], axis=-1)
    warped = sample_bilinear(packed, xs, ys)
    A = 0.5 * (r1.A + warped[..., :4].reshape(n, h, w, 2, 2))
    a11, a12, a22 = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
    db = -0.5 * (warped[..., 4:] - r1.b)
    db[..., 0] += a11 * d[..., 0] + a12 * d[..., 1]
    db[..., 1] += a12 * d[..., 0] + a22 * d[..., 1]
    # pixels displaced off the image carry no evidence; frame edges are down-weighted
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    weight = np.where(inside, _border_weights(h)[:, None] * _border_weights(w)[None, :], 0.0)
    # A is symmetric, so A^T A and A^T db need only these terms
    stats = weight[..., None] * np.stack([
        a11 * a11 + a12 * a12,
        a12 * (a11 + a22),
        a12 * a12 + a22 * a22,
        a11 * db[..., 0] + a12 * db[..., 1],
        a12 * db[..., 0] + a22 * db[..., 1],
    ], axis=-1)
    g11, g12, g22, h1, h2 = np.moveaxis(_smooth(stats, kernel), -1, 0)
    # Tikhonov term relative to the pair's mean structure, so it is contrast-free
    scale = np.mean(0.5 * (g11 + g22), axis=(1, 2), keepdims=True)
    det = g11 * g22 - g12 * g12 + regularization * scale * scale
    ok = det > 0
    idet = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    u = (g22 * h1 - g12 * h2) * idet
    v = (g11 * h2 - g12 * h1) * idet
    return np.stack([u, v], axis=-1)


def _pyramid_sizes(h: int, w: int, p: FlowParams) -> list[tuple[int, int]]:
    sizes = [(h, w)]
    scale = 1.0
    for _ in range(1, p.levels):
        scale *= p.pyr_scale
        sh, sw = int(round(h * scale)), int(round(w * scale))
        if min(sh, sw) < p.min_size:
            break
        sizes.append((sh, sw))
    return sizes


def _downscale(img: np.ndarray, size: tuple[int, int], factor: float) -> np.ndarray:
    sigma = max((1.0 / factor - 1.0) * 0.5, 1e-3)
    k = gaussian_kernel(max(int(round(3 * sigma)), 1), sigma)
    blurred = correlate1d(correlate1d(img, k, -2, "nearest"), k, -1, "nearest")
    return resize_bilinear(blurred, size)


def farneback_batch(prev: np.ndarray, nxt: np.ndarray, params: FlowParams = FlowParams()) -> np.ndarray:
    """Flow for a stack of frame pairs: (N, H, W) x 2 -> (N, H, W, 2) with (u, v) last."""
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 3:
        raise ValueError(f"expected (N, H, W) stacks, got {prev.shape}")
    n, h, w = prev.shape
    sizes = _pyramid_sizes(h, w, params)
    kernel = gaussian_kernel(params.window // 2, params.window_sigma)
    d = None
    for size in reversed(sizes):
        if size == (h, w):
            a, b = prev, nxt
        else:
            f = size[0] / h
            a, b = _downscale(prev, size, f), _downscale(nxt, size, f)
        if d is None:
            d = np.zeros(size + (2,))[None].repeat(n, axis=0)
        else:
            fy, fx = size[0] / d.shape[1], size[1] / d.shape[2]
            d = np.stack([resize_bilinear(d[..., 0], size) * fx,
                          resize_bilinear(d[..., 1], size) * fy], axis=-1)
        r1 = poly_expand(a, params.n, params.sigma)
        r2 = poly_expand(b, params.n, params.sigma)
        for _ in range(params.iterations):
            d = _update(r1, r2, d, kernel, params.regularization)
    return d.astype(np.float32)


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, levels: int = 3, pyr_scale: float = 0.5,
                   iterations: int = 3, n: int = 7, sigma: float = 1.5, **kwargs) -> FlowField:
    """Dense flow from ``prev`` to ``nxt`` (two H x W frames)."""
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 2:
        raise ValueError(f"expected single H x W frames, got {prev.shape}")
    p = FlowParams(levels=levels, pyr_scale=pyr_scale, iterations=iterations, n=n, sigma=sigma,
                   **kwargs)
    d = farneback_batch(prev[None], nxt[None], p)[0]
    return FlowField(u=d[..., 0], v=d[..., 1])


def video_flow(frames: np.ndarray, params: FlowParams = FlowParams(), chunk: int = 512) -> np.ndarray:
    """Per-frame flow (N, H, W, 2) where frame t holds flow(t-1 -> t) and frame 0 is zero."""
    frames = np.asarray(frames)
    out = np.zeros(frames.shape + (2,), dtype=np.float32)
    for lo in range(1, len(frames), chunk):
        hi = min(lo + chunk, len(frames))
        out[lo:hi] = farneback_batch(frames[lo - 1 : hi - 1], frames[lo:hi], params)
    return out


def flow_to_stream(flow: np.ndarray, max_disp: float = 4.0) -> np.ndarray:
    """Clamp (u, v) to [-max_disp, max_disp] and map affinely onto [0, 1]."""
    flow = np.asarray(flow, dtype=np.float32)
    m = np.float32(max_disp)
    return ((np.clip(flow, -m, m) + m) / (2 * m)).astype(np.float32)


def stream_to_flow(stream: np.ndarray, max_disp: float = 4.0) -> np.ndarray:
    m = np.float32(max_disp)
    return (np.asarray(stream, dtype=np.float32) * (2 * m) - m).astype(np.float32)
