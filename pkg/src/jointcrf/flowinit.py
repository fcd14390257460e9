"""Initial dense flow: coarse-to-fine Horn-Schunck plus weighted median filtering."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from ._ops import deriv, grid_laplacian, resize, warp
from .imagecore import as_channels, check_flow, check_same_shape, luminance

log = logging.getLogger(__name__)


@dataclass
class HsParams:
    """Horn-Schunck settings.

    ``smoothness_alpha`` is the classic Horn-Schunck alpha expressed in 8-bit
    intensity units (the data term is evaluated on intensities scaled to
    0..255).  ``pyramid_levels=None`` picks the deepest pyramid whose
    coarsest side is still at least 16 pixels.
    """

    smoothness_alpha: float = 8.0
    pyramid_levels: int = None
    warp_iters_per_level: int = 3
    solver_iters: int = 100
    solver_tolerance: float = 1e-4
    scale_factor: float = 0.5
    median_size: int = 5

    def __post_init__(self):
        if self.smoothness_alpha <= 0:
            raise ValueError("smoothness_alpha must be positive")
        for name in ("warp_iters_per_level", "solver_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass
class WmfParams:
    radius: int = 7
    sigma_spatial: float = 7.0
    sigma_range: float = 0.1

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.sigma_spatial <= 0 or self.sigma_range <= 0:
            raise ValueError("sigmas must be positive")


def default_levels(shape, scale=0.5, min_side=16):
    levels = 1
    side = min(shape)
    while side * scale >= min_side:
        side *= scale
        levels += 1
    return levels


def _pyramid(img, levels, scale):
    pyr = [img]
    sigma = 1.0 / np.sqrt(2.0 * scale)
    for _ in range(levels - 1):
        prev = pyr[-1]
        shape = (max(1, int(np.ceil(prev.shape[0] * scale))),
                 max(1, int(np.ceil(prev.shape[1] * scale))))
        pyr.append(resize(ndimage.gaussian_filter(prev, sigma, mode="nearest"), shape))
    return pyr


def _upsample_flow(flow, shape):
    h, w = flow.shape[:2]
    out = np.empty(shape + (2,))
    out[..., 0] = resize(flow[..., 0], shape) * (shape[1] / w)
    out[..., 1] = resize(flow[..., 1], shape) * (shape[0] / h)
    return out


def _solve_increment(i1, i2, flow, lam, lap, params):
    """One linearized Horn-Schunck step around ``flow``."""
    h, w = i1.shape
    i2w, outside = warp(i2, flow)
    ix = 0.5 * (deriv(i2w, 1) + deriv(i1, 1))
    iy = 0.5 * (deriv(i2w, 0) + deriv(i1, 0))
    it = i2w - i1
    ix[outside] = iy[outside] = it[outside] = 0.0

    ix, iy, it = ix.ravel(), iy.ravel(), it.ravel()
    u, v = flow[..., 0].ravel(), flow[..., 1].ravel()
    a = sparse.bmat([[sparse.diags(ix * ix) + lam * lap, sparse.diags(ix * iy)],
                     [sparse.diags(ix * iy), sparse.diags(iy * iy) + lam * lap]],
                    format="csr")
    b = -np.concatenate([ix * it + lam * (lap @ u), iy * it + lam * (lap @ v)])
    if not np.any(b):
        return np.zeros_like(flow)
    diag = a.diagonal()
    precond = sparse.diags(np.where(diag > 0, 1.0 / np.maximum(diag, 1e-30), 1.0))
    x, _ = cg(a, b, rtol=params.solver_tolerance, maxiter=params.solver_iters, M=precond)
    return np.stack([x[: h * w].reshape(h, w), x[h * w:].reshape(h, w)], axis=-1)


def horn_schunck(i1, i2, params=None):
    """Coarse-to-fine Horn-Schunck flow from ``i1`` to ``i2``.

    Both images are reduced to luminance.  Each pyramid level runs
    ``warp_iters_per_level`` linearize-and-solve steps, each followed by a
    plain median filter of the flow.
    """
    params = params or HsParams()
    check_same_shape(i1, i2, names=("i1", "i2"))
    g1 = luminance(i1) * 255.0
    g2 = luminance(i2) * 255.0
    levels = params.pyramid_levels or default_levels(g1.shape, params.scale_factor)
    pyr1 = _pyramid(g1, levels, params.scale_factor)
    pyr2 = _pyramid(g2, levels, params.scale_factor)
    lam = params.smoothness_alpha ** 2

    flow = np.zeros(pyr1[-1].shape + (2,))
    for level in range(levels - 1, -1, -1):
        a1, a2 = pyr1[level], pyr2[level]
        if flow.shape[:2] != a1.shape:
            flow = _upsample_flow(flow, a1.shape)
        lap = grid_laplacian(*a1.shape)
        for _ in range(params.warp_iters_per_level):
            flow = flow + _solve_increment(a1, a2, flow, lam, lap, params)
            if params.median_size > 1:
                for c in range(2):
                    flow[..., c] = ndimage.median_filter(flow[..., c], params.median_size,
                                                         mode="nearest")
        log.debug("HS level %d (%dx%d) done", level, a1.shape[1], a1.shape[0])
    return flow


def _window_offsets(radius):
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return dy.ravel(), dx.ravel()


def weighted_median_refine(flow, guide, params=None, chunk_elems=4_000_000):
    """Guided weighted median of each flow component.

    The weight of window pixel ``q`` for center ``p`` is
    ``exp(-|p-q|^2 / sigma_spatial^2 - |guide_p - guide_q|^2 / sigma_range^2)``.
    The output at ``p`` is the smallest window value whose cumulative weight
    (values in ascending order) reaches half of the total weight.
    """
    params = params or WmfParams()
    flow = check_flow(flow)
    check_same_shape(flow, guide, names=("flow", "guide"))
    g = as_channels(guide)
    h, w = flow.shape[:2]
    r = params.radius
    dy, dx = _window_offsets(r)
    spatial = np.exp(-(dx ** 2 + dy ** 2) / params.sigma_spatial ** 2)

    gpad = np.pad(g, ((r, r), (r, r), (0, 0)), mode="edge")
    fpad = np.pad(flow, ((r, r), (r, r), (0, 0)), mode="edge")
    out = np.empty_like(flow)
    k = dy.size
    rows = max(1, chunk_elems // (k * w))
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        center = g[y0:y1]
        wts = np.empty((k, y1 - y0, w))
        vals = np.empty((k, y1 - y0, w, 2))
        for j in range(k):
            ys = slice(y0 + r + dy[j], y1 + r + dy[j])
            xs = slice(r + dx[j], r + dx[j] + w)
            diff = gpad[ys, xs] - center
            wts[j] = spatial[j] * np.exp(-np.sum(diff * diff, axis=-1) / params.sigma_range ** 2)
            vals[j] = fpad[ys, xs]
        half = 0.5 * wts.sum(axis=0)
        for c in range(2):
            order = np.argsort(vals[..., c], axis=0, kind="stable")
            sv = np.take_along_axis(vals[..., c], order, axis=0)
            cw = np.cumsum(np.take_along_axis(wts, order, axis=0), axis=0)
            pick = np.argmax(cw >= half[None], axis=0)
            out[y0:y1, :, c] = np.take_along_axis(sv, pick[None], axis=0)[0]
    return out
