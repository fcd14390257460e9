"""Unary potentials of the joint correspondence/segmentation field.

For a pixel ``p`` with correspondence label ``c`` (an index into the regional
candidate maps) and segmentation label ``m`` the unary cost is

    -log h(w^c_p, m)  +  alpha1 * (1 - exp(-mu_c(p) / sigma_c^2))
                      +  alpha2 * (-log S_p(m) C_p(m))

where ``h`` is the joint flow/mask histogram of the initial estimates,
``mu_c`` the intensity-plus-gradient matching cost of candidate ``c``, ``S``
the segmentation score map and ``C`` the foreground or background color
mixture density.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._ops import central_gradient, sample_bilinear
from .imagecore import as_channels, check_flow, check_same_shape, clamp_probability, luminance

log = logging.getLogger(__name__)

OCCLUSION_COST = 0.5
DENSITY_FLOOR = 1e-12


@dataclass
class UnaryParams:
    alpha1: float = 1.5
    alpha2: float = 1.5
    sigma_c: float = 0.2
    bin_px: float = 2.0
    hist_epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "sigma_c", "bin_px", "hist_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# -- joint histogram ---------------------------------------------------------------

@dataclass
class JointHistogram:
    """Smoothed joint distribution of binned flow and mask label.

    ``probs[iu, iv, m]``.  Along each flow axis bin 0 and the last bin catch
    values below ``lo`` and beyond the covered range.
    """

    lo: np.ndarray
    bin_px: float
    probs: np.ndarray
    epsilon: float

    @property
    def inner_bins(self):
        return np.array(self.probs.shape[:2]) - 2

    def bin_index(self, flow):
        flow = np.asarray(flow, dtype=np.float64)
        idx = np.floor((flow - self.lo) / self.bin_px).astype(np.int64) + 1
        nb = self.inner_bins
        iu = np.clip(idx[..., 0], 0, nb[0] + 1)
        iv = np.clip(idx[..., 1], 0, nb[1] + 1)
        return iu, iv

    def neg_log(self, flow):
        """``-log h(bin(flow), m)`` as an array of shape ``flow.shape[:-1] + (2,)``."""
        iu, iv = self.bin_index(flow)
        return -np.log(self.probs[iu, iv])


def build_joint_histogram(init_flow, init_mask, bin_px=2.0, epsilon=1e-4, flow_range=None):
    """Joint histogram of ``(binned flow, mask)`` over all pixels.

    ``flow_range = ((u_min, v_min), (u_max, v_max))`` sets the covered range,
    normally the extent of the regional candidate maps; by default the range
    of ``init_flow``.  Normalized counts ``p`` are smoothed as
    ``(1 - epsilon) * p + epsilon / n_entries``.
    """
    init_flow = check_flow(init_flow)
    mask = np.asarray(init_mask).astype(bool)
    check_same_shape(init_flow, mask, names=("init_flow", "init_mask"))
    if flow_range is None:
        lo = init_flow.reshape(-1, 2).min(axis=0)
        hi = init_flow.reshape(-1, 2).max(axis=0)
    else:
        lo, hi = (np.asarray(r, dtype=np.float64) for r in flow_range)
    nb = np.floor((hi - lo) / bin_px).astype(np.int64) + 1
    hist = JointHistogram(lo, float(bin_px), np.zeros((nb[0] + 2, nb[1] + 2, 2)), epsilon)
    iu, iv = hist.bin_index(init_flow)
    counts = np.zeros(hist.probs.shape)
    np.add.at(counts, (iu.ravel(), iv.ravel(), mask.ravel().astype(np.int64)), 1.0)
    probs = counts / counts.sum()
    hist.probs = (1.0 - epsilon) * probs + epsilon / probs.size
    return hist


def regional_flow_range(maps):
    stack = np.asarray(maps).reshape(-1, 2)
    return stack.min(axis=0), stack.max(axis=0)


# -- matching cost -----------------------------------------------------------------------

def _match_channels(i1, i2):
    """Bring both images to the same channel layout (luminance if they differ)."""
    a, b = as_channels(i1), as_channels(i2)
    if a.shape[2] != b.shape[2]:
        a, b = luminance(i1)[..., None], luminance(i2)[..., None]
    return a, b


def matching_cost(i1, i2, w):
    """Per-pixel intensity-plus-gradient matching cost of flow ``w``.

    ``mu_p = |I1_p - I2(p+w_p)| + |dI1/dx_p - dI2/dx(p+w_p)| + |dI1/dy_p - dI2/dy(p+w_p)|``
    with ``I2`` and its central-difference gradients sampled bilinearly.
    Color differences are averaged over channels.  Pixels whose target falls
    outside the frame cost ``OCCLUSION_COST``.
    """
    w = check_flow(w)
    check_same_shape(i1, i2, w, names=("i1", "i2", "w"))
    a, b = _match_channels(i1, i2)
    h, wd = w.shape[:2]
    yy, xx = np.mgrid[0:h, 0:wd].astype(np.float64)
    tx, ty = xx + w[..., 0], yy + w[..., 1]
    cost = np.zeros((h, wd))
    outside = None
    for ch in range(a.shape[2]):
        ax, ay = central_gradient(a[..., ch])
        bx, by = central_gradient(b[..., ch])
        stacked = np.stack([b[..., ch], bx, by], axis=-1)
        sampled, outside = sample_bilinear(stacked, tx, ty)
        cost += (np.abs(a[..., ch] - sampled[..., 0]) + np.abs(ax - sampled[..., 1])
                 + np.abs(ay - sampled[..., 2]))
    cost /= a.shape[2]
    cost[outside] = OCCLUSION_COST
    return cost


def unary_correspondence(mu, sigma_c=0.2):
    """``1 - exp(-mu / sigma_c^2)``."""
    return -np.expm1(-np.asarray(mu, dtype=np.float64) / sigma_c ** 2)


# -- Gaussian mixtures -------------------------------------------------------------------

@dataclass
class GaussianMixture:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik_history: list = field(default_factory=list, repr=False)

    @property
    def k(self):
        return len(self.weights)

    def component_log_pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        diff = x[:, None, :] - self.means[None]
        return -0.5 * (np.sum(diff ** 2 / self.variances[None], axis=2)
                       + np.sum(np.log(2.0 * np.pi * self.variances), axis=1)[None])

    def log_pdf(self, x):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self.component_log_pdf(x) + logw[None], axis=1)

    def pdf(self, x):
        return np.exp(self.log_pdf(x))


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(x), p=d2 / total)
        else:
            idx = rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(samples, k, seed=0, variance_floor=1e-4, tol=1e-5, max_iter=100):
    """Fit a diagonal Gaussian mixture by EM from a seeded k-means++ start.

    Stops when the relative change of the mean log-likelihood drops below
    ``tol`` or after ``max_iter`` iterations.  Variances are floored at
    ``variance_floor``, which is the exact constrained maximizer of the
    M-step, so the log-likelihood never decreases.  ``k`` is reduced to the
    number of samples when fewer are given.  The per-iteration mean
    log-likelihood is kept in ``loglik_history``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise ValueError("cannot fit a mixture to zero samples")
    k = max(1, min(int(k), len(x)))
    rng = np.random.default_rng(seed)
    n, d = x.shape

    means = _kmeans_pp(x, k, rng)
    assign = np.argmin(np.sum((x[:, None, :] - means[None]) ** 2, axis=2), axis=1)
    weights = np.bincount(assign, minlength=k) / n
    variances = np.full((k, d), max(variance_floor, float(np.mean(x.var(axis=0)))))
    for j in range(k):
        members = x[assign == j]
        if len(members) > 1:
            variances[j] = np.maximum(members.var(axis=0), variance_floor)
    # k-means++ may leave a center without members; give it a small share.
    weights = np.where(weights > 0, weights, 1.0 / n)
    weights /= weights.sum()
    model = GaussianMixture(weights, means, variances)

    history = []
    prev = None
    for _ in range(max_iter):
        with np.errstate(divide="ignore"):
            joint = model.component_log_pdf(x) + np.log(model.weights)[None]
        norm = logsumexp(joint, axis=1)
        ll = float(norm.mean())
        history.append(ll)
        if prev is not None and abs(ll - prev) <= tol * max(abs(prev), 1e-12):
            break
        prev = ll
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0)
        live = nk > 1e-12
        new_means = model.means.copy()
        new_vars = model.variances.copy()
        new_means[live] = (resp[:, live].T @ x) / nk[live, None]
        for j in np.flatnonzero(live):
            diff = x - new_means[j]
            new_vars[j] = np.maximum(resp[:, j] @ (diff ** 2) / nk[j], variance_floor)
        model = GaussianMixture(nk / n, new_means, new_vars)
    model.loglik_history = history
    return model


@dataclass
class GmmColorModel:
    fg: GaussianMixture
    bg: GaussianMixture

    def densities(self, img):
        """Foreground and background densities, each shaped ``(H, W)``."""
        x = as_channels(img)
        flat = x.reshape(-1, x.shape[2])
        shape = x.shape[:2]
        return self.fg.pdf(flat).reshape(shape), self.bg.pdf(flat).reshape(shape)


def fit_color_model(img, mask, k_fg=6, k_bg=4, seed=0, variance_floor=1e-4,
                    max_samples=20000):
    """Fit foreground/background color mixtures to ``img`` split by ``mask``.

    At most ``max_samples`` pixels per side are used (a seeded random
    subset).  A side with no pixels falls back to all pixels of the image.
    """
    x = as_channels(img)
    flat = x.reshape(-1, x.shape[2])
    sel = np.asarray(mask).astype(bool).ravel()
    rng = np.random.default_rng(seed)
    models = []
    for pick, k, offset in ((sel, k_fg, 0), (~sel, k_bg, 1)):
        data = flat[pick] if pick.any() else flat
        if len(data) > max_samples:
            data = data[rng.choice(len(data), max_samples, replace=False)]
        models.append(fit_gmm(data, k, seed=seed + offset, variance_floor=variance_floor))
    return GmmColorModel(*models)


def unary_segmentation(score, gmm, img):
    """``-log S(m) - log C(m)`` for ``m = 0, 1``, shaped ``(H, W, 2)``.

    ``S(1)`` is the clamped score map, ``S(0) = 1 - S(1)``; ``C`` is the
    background (m=0) or foreground (m=1) color density, clamped below at
    ``DENSITY_FLOOR``.
    """
    s1 = clamp_probability(score)
    check_same_shape(s1, img, names=("score", "I1"))
    hf, hb = gmm.densities(img)
    out = np.empty(s1.shape + (2,))
    out[..., 0] = -np.log(1.0 - s1) - np.log(np.maximum(hb, DENSITY_FLOOR))
    out[..., 1] = -np.log(s1) - np.log(np.maximum(hf, DENSITY_FLOOR))
    return out


# -- assembly -----------------------------------------------------------------------------

@dataclass
class PotentialTable:
    """Unary costs ``unary[y, x, c, m]`` plus the terms they were built from.

    ``hist_cost`` is ``(H, W, N, 2)``, ``corr_cost`` the weighted-free
    correspondence term ``(H, W, N)`` and ``seg_cost`` the weighted-free
    segmentation term ``(H, W, 2)``.
    """

    hist_cost: np.ndarray
    corr_cost: np.ndarray
    seg_cost: np.ndarray
    params: UnaryParams

    @property
    def unary(self):
        return combine_unary(self.hist_cost, self.corr_cost, self.seg_cost,
                             self.params.alpha1, self.params.alpha2)

    @property
    def shape(self):
        return self.hist_cost.shape

    def with_segmentation(self, seg_cost):
        return PotentialTable(self.hist_cost, self.corr_cost, seg_cost, self.params)


def combine_unary(hist_cost, corr_cost, seg_cost, alpha1=1.5, alpha2=1.5):
    """``hist + alpha1 * corr + alpha2 * seg`` broadcast over ``(..., N, 2)``."""
    hist_cost = np.asarray(hist_cost, dtype=np.float64)
    corr = np.asarray(corr_cost, dtype=np.float64)[..., None]
    seg = np.asarray(seg_cost, dtype=np.float64)[..., None, :]
    return hist_cost + alpha1 * corr + alpha2 * seg


def assemble_unary(rcs, hist, score, gmm, i1, i2, params=None):
    """Build the ``(H, W, N, 2)`` unary table for a regional candidate set."""
    params = params or UnaryParams()
    maps = rcs.stack() if hasattr(rcs, "stack") else np.asarray(rcs)
    if maps.ndim != 4 or maps.shape[0] < 1:
        raise ValueError("need at least one candidate map")
    check_same_shape(maps[0], score, i1, i2, names=("maps", "score", "I1", "I2"))
    hist_cost = np.stack([hist.neg_log(m) for m in maps], axis=2)
    corr = np.stack([unary_correspondence(matching_cost(i1, i2, m), params.sigma_c)
                     for m in maps], axis=2)
    seg = unary_segmentation(score, gmm, i1)
    table = PotentialTable(hist_cost, corr, seg, params)
    if not np.all(np.isfinite(table.unary)):
        raise FloatingPointError("non-finite unary cost")
    return table


_DUMP_MAGIC = b"JCRFUNRY"


def write_potential_dump(path, table):
    """Write the unary table: magic, then int32 width, height, N, then float32 payload."""
    unary = table.unary if isinstance(table, PotentialTable) else np.asarray(table)
    h, w, n, _ = unary.shape
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<iii", w, h, n))
        f.write(unary.astype("<f4").tobytes(order="C"))


def read_potential_dump(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _DUMP_MAGIC or len(raw) < 20:
        raise ValueError(f"{path}: not a unary table dump")
    w, h, n = struct.unpack("<iii", raw[8:20])
    data = np.frombuffer(raw, dtype="<f4", offset=20, count=h * w * n * 2)
    return data.reshape(h, w, n, 2).astype(np.float64)
