"""Regional correspondence: a small set of full-frame candidate flow maps.

The initial flow is cut at motion boundaries into connected regions.
Similar neighbors are merged and isolated outliers dropped.  Each surviving
region's flow is then extended to the whole frame by pull-push interpolation.
Every candidate map is exact on the region it came from and smooth elsewhere.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg
from skimage.filters import threshold_otsu

from ._ops import central_gradient, deriv, grid_laplacian, warp
from .flowinit import HsParams, WmfParams, horn_schunck, weighted_median_refine
from .imagecore import check_flow, check_same_shape, luminance

log = logging.getLogger(__name__)


@dataclass
class RegionalParams:
    n_max: int = 10
    boundary_threshold: float = 0.25
    merge_threshold: float = 1.5
    outlier_factor: float = 4.0
    min_region_area: float = 0.005
    min_texture: float = 0.012
    texture_sigma: float = 1.5
    refine_subpixel: bool = True

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        for name in ("boundary_threshold", "merge_threshold", "outlier_factor",
                     "min_region_area"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_texture < 0 or self.texture_sigma <= 0:
            raise ValueError("min_texture must be >= 0 and texture_sigma positive")


@dataclass
class RegionMap:
    """Per-pixel region ids; 0 marks discarded pixels, 1..count are regions.

    ``core`` flags pixels away from motion boundaries.  A region's core
    pixels provide its mean flow and seed its propagated candidate map.
    """

    labels: np.ndarray
    count: int
    core: np.ndarray = None

    def __post_init__(self):
        if self.core is None:
            self.core = np.ones(self.labels.shape, dtype=bool)

    def mask(self, region_id):
        return (self.labels == region_id).astype(np.uint8)

    def support(self, region_id):
        return ((self.labels == region_id) & self.core).astype(np.uint8)

    def areas(self):
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)


@dataclass
class RegionalCorrespondenceSet:
    """Candidate flow maps ``maps[i]`` with the support each was grown from."""

    maps: list
    supports: list
    regions: RegionMap = None
    source_flow: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.maps)

    def stack(self):
        """All maps as one ``(N, H, W, 2)`` array."""
        return np.stack(self.maps)


class _RegionGraph:
    """Region statistics and 4-adjacency, supporting merges and removals."""

    def __init__(self, labels, flow, core):
        self.labels = labels
        self.core = core
        n = int(labels.max())
        flat = labels.ravel()
        self.area = np.bincount(flat, minlength=n + 1).astype(np.float64)
        wt = core.ravel().astype(np.float64)
        self.core_area = np.bincount(flat, wt, minlength=n + 1)
        self.sum_u = np.bincount(flat, wt * flow[..., 0].ravel(), minlength=n + 1)
        self.sum_v = np.bincount(flat, wt * flow[..., 1].ravel(), minlength=n + 1)
        self.alive = {i for i in range(1, n + 1) if self.area[i] > 0}
        self.adj = {i: set() for i in self.alive}
        self.parent = np.arange(n + 1)
        for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
            sel = (a != b) & (a > 0) & (b > 0)
            pairs = np.unique(np.stack([a[sel], b[sel]], axis=1), axis=0)
            for i, j in pairs:
                self.adj[int(i)].add(int(j))
                self.adj[int(j)].add(int(i))

    def mean(self, i):
        return np.array([self.sum_u[i], self.sum_v[i]]) / max(self.core_area[i], 1e-12)

    def dist(self, i, j):
        return float(np.hypot(*(self.mean(i) - self.mean(j))))

    def nearest_neighbor(self, i):
        if not self.adj[i]:
            return None
        return min(sorted(self.adj[i]), key=lambda j: self.dist(i, j))

    def merge(self, src, dst):
        self.area[dst] += self.area[src]
        self.core_area[dst] += self.core_area[src]
        self.sum_u[dst] += self.sum_u[src]
        self.sum_v[dst] += self.sum_v[src]
        for j in self.adj.pop(src):
            self.adj[j].discard(src)
            if j != dst:
                self.adj[j].add(dst)
                self.adj[dst].add(j)
        self.alive.discard(src)
        self.parent[src] = dst

    def remove(self, i):
        for j in self.adj.pop(i):
            self.adj[j].discard(i)
        self.alive.discard(i)
        self.parent[i] = 0

    def merge_pair(self, i, j):
        """Merge the smaller region into the larger one (lower id on ties)."""
        keep, drop = (i, j) if (self.area[i], -i) >= (self.area[j], -j) else (j, i)
        self.merge(drop, keep)

    def to_region_map(self):
        root = self.parent.copy()
        for _ in range(len(root)):
            nxt = root[root]
            if np.array_equal(nxt, root):
                break
            root = nxt
        labels = root[self.labels]
        survivors = sorted(self.alive, key=lambda i: (-self.area[i], i))
        lut = np.zeros(len(root), dtype=np.int64)
        for new, old in enumerate(survivors, start=1):
            lut[old] = new
        return RegionMap(lut[labels], len(survivors), self.core.copy())


def flow_gradient_magnitude(flow):
    """Frobenius norm of the flow Jacobian (central differences)."""
    ux, uy = central_gradient(flow[..., 0])
    vx, vy = central_gradient(flow[..., 1])
    return np.sqrt(ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2)


def motion_boundaries(flow, guide, threshold):
    jac = flow_gradient_magnitude(flow)
    gx, gy = central_gradient(luminance(guide))
    edge = np.hypot(gx, gy)
    if np.ptp(edge) > 0:
        strong_edge = edge > threshold_otsu(edge)
    else:
        strong_edge = np.zeros(edge.shape, dtype=bool)
    return (jac > threshold) | ((jac > threshold / 2) & strong_edge)


def textured_pixels(img, threshold, sigma=1.5):
    """Pixels whose local RMS luminance gradient reaches ``threshold``.

    The squared central-difference gradient is Gaussian-averaged with
    ``sigma``.  Flow estimated elsewhere comes from the smoothness prior
    alone and should be replaced by propagation from textured surroundings.
    """
    gx, gy = central_gradient(luminance(img))
    energy = ndimage.gaussian_filter(gx * gx + gy * gy, sigma, mode="nearest")
    return np.sqrt(energy) >= threshold


def _expand_labels(labels):
    """Give every unlabeled pixel the label of its nearest labeled pixel."""
    unlabeled = labels == 0
    if not unlabeled.any():
        return labels
    _, (iy, ix) = ndimage.distance_transform_edt(unlabeled, return_indices=True)
    return labels[iy, ix]


def partition_regions(flow, guide, params=None):
    """Split ``flow`` into regions separated by motion boundaries.

    Boundary pixels are those with flow-Jacobian norm above the threshold, or
    above half of it where the guide image has an edge (Otsu threshold on the
    guide gradient).  The remaining pixels form 4-connected cores.  Cores
    smaller than ``min_region_area`` are fragments of unreliable flow and are
    demoted to boundary status.  Every non-core pixel then joins the region
    of its nearest core pixel, so regions tile the frame while their cores
    hold only the trustworthy flow.
    """
    params = params or RegionalParams()
    flow = check_flow(flow)
    check_same_shape(flow, guide, names=("flow", "guide"))
    h, w = flow.shape[:2]

    core = ~motion_boundaries(flow, guide, params.boundary_threshold)
    labels, n = ndimage.label(core)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= params.min_region_area * h * w
    keep[0] = False
    if not keep[1:].any():
        # No substantial core: fall back to the largest component, or to the
        # whole frame when everything is boundary.
        if n == 0:
            return RegionMap(np.ones((h, w), dtype=np.int64), 1)
        keep[np.argmax(sizes[1:]) + 1] = True
    core = keep[labels]
    labels, _ = ndimage.label(core)
    graph = _RegionGraph(_expand_labels(labels), flow, core)
    return graph.to_region_map()


def merge_and_filter(regions, flow, params=None):
    """Merge similar neighbors, drop isolated outliers, cap the region count.

    1. Repeatedly merge the adjacent pair with the smallest mean-flow
       distance while that distance is below ``merge_threshold``.
    2. Discard (id 0) small regions whose mean flow is farther than
       ``outlier_factor * merge_threshold`` from every neighbor.
    3. Merge the smallest regions into their closest-mean neighbor until at
       most ``n_max - 1`` remain.
    """
    params = params or RegionalParams()
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    graph = _RegionGraph(regions.labels, flow, regions.core)

    while True:
        best = None
        for i in sorted(graph.alive):
            for j in graph.adj[i]:
                if j <= i:
                    continue
                d = graph.dist(i, j)
                if d < params.merge_threshold and (best is None or d < best[0]):
                    best = (d, i, j)
        if best is None:
            break
        graph.merge_pair(best[1], best[2])

    far = params.outlier_factor * params.merge_threshold
    small = params.min_region_area * 4 * h * w
    outliers = [i for i in sorted(graph.alive)
                if graph.adj[i] and graph.area[i] < small
                and all(graph.dist(i, j) > far for j in graph.adj[i])]
    for i in outliers:
        graph.remove(i)

    cap = max(1, params.n_max - 1)
    while len(graph.alive) > cap:
        i = min(graph.alive, key=lambda k: (graph.area[k], -k))
        j = graph.nearest_neighbor(i)
        if j is None:
            graph.remove(i)
        else:
            graph.merge(i, j)
    return graph.to_region_map()


# -- propagation ------------------------------------------------------------------

def _splat_matrix(n):
    """Bilinear splatting from ``n`` samples onto ``ceil(n / 2)`` nodes.

    Coarse nodes are corner aligned: node ``c`` sits at fine coordinate
    ``c * (n - 1) / (m - 1)``, so the first and last samples keep their
    positions and the pyramid is mirror symmetric.  The transpose is the
    matching linear interpolation (each of its rows sums to one).
    """
    m = (n + 1) // 2
    if m == 1:
        return sparse.csr_matrix(np.ones((1, n)))
    pos = np.arange(n) * (m - 1) / (n - 1)
    lo = np.minimum(np.floor(pos).astype(int), m - 2)
    frac = pos - lo
    rows = np.concatenate([lo, lo + 1])
    cols = np.concatenate([np.arange(n), np.arange(n)])
    vals = np.concatenate([1.0 - frac, frac])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, n))


def _apply(mat, arr, axis):
    moved = np.moveaxis(arr, axis, 0)
    out = mat @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(out.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)


def propagate_region(flow, support):
    """Extend ``flow`` from the ``support`` pixels to the full frame.

    Pull-push interpolation.  The pull phase splats the masked flow and the
    mask down a corner-aligned pyramid of halving resolution until a single
    node remains.  The push phase walks back up: at each level, nodes with
    accumulated weight ``a`` keep ``min(a, 1)`` of their own normalized value
    and take the rest from the interpolated coarser level, so empty nodes
    are filled entirely from below.  A final 3x3 box pass smooths the
    filled pixels.  Support pixels keep their exact input values.
    """
    flow = check_flow(flow)
    support = np.asarray(support).astype(bool)
    check_same_shape(flow, support, names=("flow", "support"))
    if not support.any():
        raise ValueError("support mask is empty")
    wt = support.astype(np.float64)
    num = flow * wt[..., None]

    levels = [(num, wt, None, None)]
    while levels[-1][1].shape != (1, 1):
        num, wt = levels[-1][:2]
        h, w = wt.shape
        py = _splat_matrix(h) if h > 1 else None
        px = _splat_matrix(w) if w > 1 else None
        if py is not None:
            num, wt = _apply(py, num, 0), _apply(py, wt, 0)
        if px is not None:
            num, wt = _apply(px, num, 1), _apply(px, wt, 1)
        levels.append((num, wt, py, px))

    num, wt = levels[-1][:2]
    filled = num / wt[..., None]
    for k in range(len(levels) - 1, 0, -1):
        _, _, py, px = levels[k]
        num, wt = levels[k - 1][:2]
        up = filled
        if py is not None:
            up = _apply(py.T.tocsr(), up, 0)
        if px is not None:
            up = _apply(px.T.tocsr(), up, 1)
        own = num / np.maximum(wt, 1e-300)[..., None]
        alpha = np.minimum(wt, 1.0)[..., None]
        filled = alpha * own + (1.0 - alpha) * up

    smooth = ndimage.uniform_filter(filled, size=(3, 3, 1), mode="nearest")
    return np.where(support[..., None], flow, smooth)


# -- finest-scale variational refinement ------------------------------------------

@dataclass
class RefineParams:
    gradient_weight: float = 1.0
    smoothness: float = 0.05
    outer_iters: int = 3
    inner_iters: int = 30
    epsilon_sq: float = 1e-6
    max_step: float = 1.0


def _robust_weight(s2, eps2):
    """Derivative of sqrt(s2 + eps2) with respect to s2."""
    return 0.5 / np.sqrt(s2 + eps2)


def refine_subpixel(w, i1, i2, params=None):
    """Sub-pixel correction of a flow map by one finest-scale variational solve.

    ``i2`` is warped by ``w`` and the brightness and gradient constancy terms
    are linearized around it.  Both use the penalty ``sqrt(x^2 + 1e-6)``, and
    a total-variation style term regularizes the increment.  The increment is
    found by lagged-nonlinearity fixed-point iterations, each solved with a
    few conjugate gradient steps, and is clamped to ``max_step`` pixels.
    """
    params = params or RefineParams()
    w = check_flow(w)
    check_same_shape(w, i1, i2, names=("w", "i1", "i2"))
    g1, g2 = luminance(i1), luminance(i2)
    h, wd = g1.shape
    n = h * wd

    g2w, outside = warp(g2, w)
    ix = 0.5 * (deriv(g2w, 1) + deriv(g1, 1))
    iy = 0.5 * (deriv(g2w, 0) + deriv(g1, 0))
    iz = g2w - g1
    ixx = 0.5 * (deriv(deriv(g2w, 1), 1) + deriv(deriv(g1, 1), 1))
    iyy = 0.5 * (deriv(deriv(g2w, 0), 0) + deriv(deriv(g1, 0), 0))
    ixy = 0.5 * (deriv(deriv(g2w, 1), 0) + deriv(deriv(g1, 1), 0))
    ixz = deriv(g2w, 1) - deriv(g1, 1)
    iyz = deriv(g2w, 0) - deriv(g1, 0)
    for arr in (ix, iy, iz, ixx, iyy, ixy, ixz, iyz):
        arr[outside] = 0.0
    if not (np.any(iz) or np.any(ixz) or np.any(iyz)):
        return w.copy()

    gamma, alpha, eps2 = params.gradient_weight, params.smoothness, params.epsilon_sq
    du = np.zeros((h, wd))
    dv = np.zeros((h, wd))
    for _ in range(params.outer_iters):
        pd = _robust_weight((iz + ix * du + iy * dv) ** 2, eps2)
        pg = gamma * _robust_weight((ixz + ixx * du + ixy * dv) ** 2
                                    + (iyz + ixy * du + iyy * dv) ** 2, eps2)
        dux, duy = np.diff(du, axis=1, append=du[:, -1:]), np.diff(du, axis=0, append=du[-1:])
        dvx, dvy = np.diff(dv, axis=1, append=dv[:, -1:]), np.diff(dv, axis=0, append=dv[-1:])
        ps = _robust_weight(dux ** 2 + duy ** 2 + dvx ** 2 + dvy ** 2, eps2)
        wx = 0.5 * (ps[:, :-1] + ps[:, 1:])
        wy = 0.5 * (ps[:-1, :] + ps[1:, :])
        wx = np.pad(wx, ((0, 0), (0, 1)))
        wy = np.pad(wy, ((0, 1), (0, 0)))
        lap = alpha * grid_laplacian(h, wd, wx, wy)

        a11 = (pd * ix * ix + pg * (ixx * ixx + ixy * ixy)).ravel()
        a12 = (pd * ix * iy + pg * (ixx * ixy + ixy * iyy)).ravel()
        a22 = (pd * iy * iy + pg * (ixy * ixy + iyy * iyy)).ravel()
        b1 = -(pd * ix * iz + pg * (ixx * ixz + ixy * iyz)).ravel()
        b2 = -(pd * iy * iz + pg * (ixy * ixz + iyy * iyz)).ravel()
        a = sparse.bmat([[sparse.diags(a11) + lap, sparse.diags(a12)],
                         [sparse.diags(a12), sparse.diags(a22) + lap]], format="csr")
        diag = a.diagonal()
        precond = sparse.diags(np.where(diag > 0, 1.0 / np.maximum(diag, 1e-30), 1.0))
        x0 = np.concatenate([du.ravel(), dv.ravel()])
        x, _ = cg(a, np.concatenate([b1, b2]), x0=x0, rtol=1e-10,
                  maxiter=params.inner_iters, M=precond)
        du, dv = x[:n].reshape(h, wd), x[n:].reshape(h, wd)

    mag = np.hypot(du, dv)
    scale = np.where(mag > params.max_step, params.max_step / np.maximum(mag, 1e-12), 1.0)
    return w + np.stack([du * scale, dv * scale], axis=-1)


# -- driver -------------------------------------------------------------------------

def initial_flow(i1, i2, hs=None, wmf=None):
    """Horn-Schunck flow followed by the guided weighted median."""
    raw = horn_schunck(i1, i2, hs)
    return raw, weighted_median_refine(raw, i1, wmf)


def build_regional_set(i1, i2, params=None, hs=None, wmf=None, filtered_flow=None):
    """Construct the candidate maps used as the correspondence label space.

    A candidate's support is its region's core restricted to textured pixels
    of ``i1`` (the whole core when the region has no textured pixel).
    ``filtered_flow`` may pass a precomputed weighted-median-filtered
    Horn-Schunck flow; otherwise it is computed here.
    """
    params = params or RegionalParams()
    check_same_shape(i1, i2, names=("i1", "i2"))
    if filtered_flow is None:
        _, filtered_flow = initial_flow(i1, i2, hs or HsParams(), wmf or WmfParams())
    regions = partition_regions(filtered_flow, i1, params)
    regions = merge_and_filter(regions, filtered_flow, params)
    textured = textured_pixels(i1, params.min_texture, params.texture_sigma)
    maps, supports = [], []
    for rid in range(1, regions.count + 1):
        support = regions.support(rid)
        if np.any(support & textured):
            support = support & textured
        wi = propagate_region(filtered_flow, support)
        if params.refine_subpixel:
            wi = refine_subpixel(wi, i1, i2)
        maps.append(wi)
        supports.append(support)
    log.info("regional set: %d candidate maps", len(maps))
    return RegionalCorrespondenceSet(maps, supports, regions, filtered_flow)


def uniform_label_set(k, shape, box):
    """Constant candidate maps on a regular grid over ``box``.

    ``box`` is ``(u_min, u_max, v_min, v_max)``.  The grid has ``ceil(sqrt(k))``
    columns; the first ``k`` grid points in row-major order are used.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    u0, u1, v0, v1 = box
    side = int(np.ceil(np.sqrt(k)))
    rows = int(np.ceil(k / side))
    us = np.linspace(u0, u1, side) if side > 1 else np.array([(u0 + u1) / 2])
    vs = np.linspace(v0, v1, rows) if rows > 1 else np.array([(v0 + v1) / 2])
    pts = [(u, v) for v in vs for u in us][:k]
    h, w = shape
    maps = [np.broadcast_to(np.array(p, dtype=np.float64), (h, w, 2)).copy() for p in pts]
    supports = [np.zeros((h, w), dtype=np.uint8) for _ in pts]
    return RegionalCorrespondenceSet(maps, supports)
