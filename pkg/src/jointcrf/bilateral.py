"""Gaussian bilateral sums over all pixel pairs, exact and approximate.

Both filters compute, for every pixel ``p`` and channel ``k``,

    out[p, k] = sum_{q != p} g(p, q) * x[q, k]
    g(p, q)   = exp(-|p - q|^2 / sigma_s^2 - (L_p - L_q)^2 / sigma_r^2)

where ``L`` is the luminance of the guide image.  :class:`ExactFilter` does
this with explicit pairwise weights (quadratic cost, for small images and as
a reference).  :class:`GridFilter` splats onto a downsampled
``(x, y, luminance)`` grid, blurs it and slices it back.
"""

import numpy as np
from scipy import ndimage

from .imagecore import luminance


def bilateral_weight(p, q, guide, sigma_s, sigma_r):
    """Weight between pixels ``p = (x, y)`` and ``q`` of ``guide``."""
    lum = luminance(guide)
    (px, py), (qx, qy) = p, q
    d2 = (px - qx) ** 2 + (py - qy) ** 2
    r2 = (lum[py, px] - lum[qy, qx]) ** 2
    return float(np.exp(-d2 / sigma_s ** 2 - r2 / sigma_r ** 2))


def _features(guide):
    lum = luminance(guide)
    h, w = lum.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx.ravel(), yy.ravel(), lum.ravel()


class ExactFilter:
    """Explicit pairwise bilateral sums, computed in row blocks."""

    def __init__(self, guide, sigma_s, sigma_r, block=2048):
        self.x, self.y, self.lum = _features(guide)
        self.shape = luminance(guide).shape
        self.sigma_s, self.sigma_r = float(sigma_s), float(sigma_r)
        self.block = block

    @property
    def n(self):
        return self.x.size

    def rows(self, idx):
        """Weights ``g(p, q)`` for pixels ``p`` in ``idx`` against all ``q``; self weight 0."""
        idx = np.atleast_1d(idx)
        d2 = (self.x[idx, None] - self.x[None]) ** 2 + (self.y[idx, None] - self.y[None]) ** 2
        r2 = (self.lum[idx, None] - self.lum[None]) ** 2
        g = np.exp(-d2 / self.sigma_s ** 2 - r2 / self.sigma_r ** 2)
        g[np.arange(idx.size), idx] = 0.0
        return g

    def apply(self, values):
        """Bilateral sums of ``values`` shaped ``(H, W, K)`` (self excluded)."""
        flat = values.reshape(self.n, -1)
        out = np.empty_like(flat)
        for start in range(0, self.n, self.block):
            idx = np.arange(start, min(self.n, start + self.block))
            out[idx] = self.rows(idx) @ flat
        return out.reshape(values.shape)


def _gauss_kernel(std, peak_mass):
    """Sampled Gaussian with standard deviation ``std`` (grid cells), scaled to ``peak_mass``."""
    radius = max(1, int(np.ceil(4.0 * std)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * t ** 2 / std ** 2)
    return k * (peak_mass / k.sum())


class GridFilter:
    """Bilateral sums through a downsampled ``(x, y, luminance)`` grid.

    Cell sizes are ``sigma_s / (2 * resolution)`` spatially and
    ``sigma_r / (2 * resolution)`` in luminance.  Values are splatted with
    trilinear weights, blurred with a separable Gaussian and sliced back
    trilinearly.  Splatting and slicing each add a tent blur of variance
    1/6 cell^2 per axis, so the grid Gaussian is narrowed by that amount
    to keep the overall kernel width right.
    """

    def __init__(self, guide, sigma_s, sigma_r, resolution=1.0):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        x, y, lum = _features(guide)
        self.shape = luminance(guide).shape
        self.cell_s = sigma_s / (2.0 * resolution)
        self.cell_r = sigma_r / (2.0 * resolution)
        coords = np.stack([y / self.cell_s, x / self.cell_s,
                           (lum - lum.min()) / self.cell_r], axis=1)
        # Padding so the blur does not wrap and the trilinear stencil stays inside.
        std = np.sqrt(2.0) * resolution
        comp = np.sqrt(max(std ** 2 - 1.0 / 3.0, 0.05))
        self._kernel = _gauss_kernel(comp, np.sqrt(2.0 * np.pi) * std)
        pad = len(self._kernel) // 2 + 1
        coords += pad
        self.grid_shape = tuple(int(np.floor(c)) + pad + 2 for c in coords.max(axis=0))
        base = np.floor(coords).astype(np.int64)
        frac = coords - base
        self._index = []
        self._weight = []
        strides = np.array([self.grid_shape[1] * self.grid_shape[2], self.grid_shape[2], 1])
        for corner in range(8):
            offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            wgt = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
            self._index.append((base + offs) @ strides)
            self._weight.append(wgt)
        self._size = int(np.prod(self.grid_shape))

    def apply(self, values):
        """Approximate bilateral sums of ``values`` shaped ``(H, W, K)`` (self excluded)."""
        flat = values.reshape(-1, values.shape[-1])
        k = flat.shape[1]
        grid = np.zeros((k, self._size))
        for idx, wgt in zip(self._index, self._weight):
            for c in range(k):
                grid[c] += np.bincount(idx, wgt * flat[:, c], minlength=self._size)
        grid = grid.reshape((k,) + self.grid_shape)
        for axis in (1, 2, 3):
            grid = ndimage.correlate1d(grid, self._kernel, axis=axis, mode="constant")
        grid = grid.reshape(k, -1)
        out = np.zeros_like(flat)
        for idx, wgt in zip(self._index, self._weight):
            out += wgt[:, None] * grid[:, idx].T
        return (out - flat).reshape(values.shape)


def make_filter(guide, sigma_s, sigma_r, mode="exact", resolution=1.0):
    if mode == "exact":
        return ExactFilter(guide, sigma_s, sigma_r)
    if mode == "fast":
        return GridFilter(guide, sigma_s, sigma_r, resolution)
    raise ValueError(f"unknown filter mode {mode!r}")
