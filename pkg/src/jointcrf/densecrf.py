"""Fully connected CRF over joint (correspondence, segmentation) labels.

Each pixel carries ``z_p = (c_p, m_p)``: ``c_p`` picks one of ``N`` candidate
flow maps and ``m_p`` is the foreground flag.  The energy is

    E(z) = sum_p U_p(c_p, m_p) + sum_{p != q} psi(z_p, z_q)
    psi  = beta1 [c_p != c_q][m_p != m_q] g^2 + beta2 [c_p != c_q] g
           + beta3 [m_p != m_q] g

with ``g`` the bilateral weight of the reference image, summed over ordered
pairs.  Inference alternates mean-field updates of the ``m`` marginals (with
``c`` fixed) and of the ``c`` marginals (with ``m`` fixed).  Messages are
bilateral sums, computed exactly or through a bilateral grid.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .bilateral import bilateral_weight, make_filter

log = logging.getLogger(__name__)


@dataclass
class CrfConfig:
    """Pairwise weights, kernel scales and the inference schedule.

    ``schedule`` is ``"sequential"`` (pixel-at-a-time coordinate updates,
    exact mode only) or ``"parallel"`` (all pixels from the previous
    iterate, mixed with it by ``damping``); None picks sequential for exact
    mode and parallel for fast mode.  ``grid_resolution`` scales the
    bilateral-grid sampling density of fast mode.
    """

    beta1: float = 3.0
    beta2: float = 3.0
    beta3: float = 3.0
    sigma_s: float = 15.0
    sigma_r: float = 0.2
    meanfield_iters_per_block: int = 5
    alternations: int = 3
    mode: str = "fast"
    schedule: str = None
    damping: float = 0.5
    grid_resolution: float = 1.0
    joint_term_single_g: bool = False

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sigma_s <= 0 or self.sigma_r <= 0:
            raise ValueError("sigma_s and sigma_r must be positive")
        if self.meanfield_iters_per_block < 1 or self.alternations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.mode not in ("exact", "fast"):
            raise ValueError(f"mode must be exact or fast, got {self.mode!r}")
        if self.schedule not in (None, "sequential", "parallel"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.mode == "fast" and self.schedule == "sequential":
            raise ValueError("sequential sweeps need the exact mode")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")

    @property
    def effective_schedule(self):
        if self.schedule is not None:
            return self.schedule
        return "sequential" if self.mode == "exact" else "parallel"


@dataclass
class MeanFieldState:
    qc: np.ndarray
    qm: np.ndarray
    t: int = 0

    def copy(self):
        return MeanFieldState(self.qc.copy(), self.qm.copy(), self.t)

    def hard_labels(self):
        """Per-pixel argmax; the lowest label index wins ties."""
        return np.argmax(self.qc, axis=-1), np.argmax(self.qm, axis=-1)


def pairwise_energy(zp, zq, g, cfg):
    """Pairwise cost of joint labels ``zp = (c_p, m_p)`` and ``zq`` at weight ``g``."""
    dc = float(zp[0] != zq[0])
    dm = float(zp[1] != zq[1])
    joint = g if cfg.joint_term_single_g else g * g
    return cfg.beta1 * dc * dm * joint + cfg.beta2 * dc * g + cfg.beta3 * dm * g


class Kernels:
    """The ``g`` and joint-term (``g^2``) bilateral filters for one image."""

    def __init__(self, guide, cfg, mode=None):
        mode = mode or cfg.mode
        self.mode = mode
        self.cfg = cfg
        self.g = make_filter(guide, cfg.sigma_s, cfg.sigma_r, mode, cfg.grid_resolution)
        if cfg.joint_term_single_g:
            self.g2 = self.g
        else:
            # g^2 is a Gaussian with both scales divided by sqrt(2).
            self.g2 = make_filter(guide, cfg.sigma_s / np.sqrt(2.0), cfg.sigma_r / np.sqrt(2.0),
                                  mode, cfg.grid_resolution)

    def joint_rows(self, idx):
        g = self.g.rows(idx)
        return g, (g if self.cfg.joint_term_single_g else g * g)


def initial_state(unary):
    """Marginals of the per-pixel joint softmax of ``-unary``."""
    logp = -unary - logsumexp(-unary, axis=(-2, -1), keepdims=True)
    p = np.exp(logp)
    return MeanFieldState(p.sum(axis=-1), p.sum(axis=-2), 0)


# -- energies ------------------------------------------------------------------------------

def _expected_pairwise(qc, qm, kernels, cfg):
    """``sum_{p != q} E_Q[psi(z_p, z_q)]`` for factorized marginals."""
    n = qc.shape[-1]
    ones = np.ones(qc.shape[:2] + (1,))
    fg = kernels.g.apply(np.concatenate([ones, qc, qm], axis=-1))
    g1, gqc, gqm = fg[..., :1], fg[..., 1:1 + n], fg[..., 1 + n:]
    pair_c = np.sum(g1[..., 0] - np.sum(qc * gqc, axis=-1))
    pair_m = np.sum(g1[..., 0] - np.sum(qm * gqm, axis=-1))
    total = cfg.beta2 * pair_c + cfg.beta3 * pair_m
    if cfg.beta1 > 0:
        prod = (qc[..., :, None] * qm[..., None, :]).reshape(qc.shape[:2] + (2 * n,))
        f2 = kernels.g2.apply(np.concatenate([ones, qc, qm, prod], axis=-1))
        h1, hqc, hqm, hprod = (f2[..., :1], f2[..., 1:1 + n], f2[..., 1 + n:3 + n],
                               f2[..., 3 + n:])
        joint = (h1[..., 0] - np.sum(qc * hqc, axis=-1) - np.sum(qm * hqm, axis=-1)
                 + np.sum(prod * hprod, axis=-1))
        total += cfg.beta1 * np.sum(joint)
    return float(total)


def _one_hot(labels, k):
    return (labels[..., None] == np.arange(k)).astype(np.float64)


def energy(c, m, unary, guide, cfg, kernels=None):
    """``E(z)`` for hard labels ``c`` (H, W) and ``m`` (H, W).

    The pairwise sum runs over all ordered pixel pairs.  With the exact
    kernels this is the literal quadratic-cost sum; with fast kernels it is
    the bilateral-grid approximation.
    """
    unary = np.asarray(unary, dtype=np.float64)
    kernels = kernels or Kernels(guide, cfg)
    c = np.asarray(c)
    m = np.asarray(m)
    un = np.take_along_axis(unary, c[..., None, None], axis=2)[..., 0, :]
    un = np.take_along_axis(un, m[..., None], axis=2)[..., 0]
    qc = _one_hot(c, unary.shape[2])
    qm = _one_hot(m, 2)
    return float(un.sum()) + _expected_pairwise(qc, qm, kernels, cfg)


def energy_bruteforce(c, m, unary, guide, cfg):
    """Literal double loop over ordered pairs (tiny instances only)."""
    h, w = c.shape
    total = 0.0
    pix = [(x, y) for y in range(h) for x in range(w)]
    for (x, y) in pix:
        total += unary[y, x, c[y, x], m[y, x]]
        for (qx, qy) in pix:
            if (qx, qy) == (x, y):
                continue
            g = bilateral_weight((x, y), (qx, qy), guide, cfg.sigma_s, cfg.sigma_r)
            total += pairwise_energy((c[y, x], m[y, x]), (c[qy, qx], m[qy, qx]), g, cfg)
    return total


def _entropy_term(q):
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(q > 0, q * np.log(q), 0.0)))


def free_energy(state, unary, guide, cfg, kernels=None):
    """Mean-field free energy ``E_Q[E] + sum Q log Q`` of a factorized state."""
    kernels = kernels or Kernels(guide, cfg)
    un = np.einsum("yxc,yxm,yxcm->", state.qc, state.qm, unary)
    return (float(un) + _expected_pairwise(state.qc, state.qm, kernels, cfg)
            + _entropy_term(state.qc) + _entropy_term(state.qm))


# -- block updates ---------------------------------------------------------------------------

def _m_messages(qc, qm, kernels, cfg):
    """Pairwise part of the m-block cost for all pixels, shaped (H, W, 2)."""
    n = qc.shape[-1]
    notm = 1.0 - qm
    msg = cfg.beta3 * kernels.g.apply(notm)
    if cfg.beta1 > 0:
        prod = (qc[..., :, None] * notm[..., None, :]).reshape(qc.shape[:2] + (2 * n,))
        f = kernels.g2.apply(np.concatenate([notm, prod], axis=-1))
        fprod = f[..., 2:].reshape(qc.shape[:2] + (n, 2))
        msg = msg + cfg.beta1 * (f[..., :2] - np.einsum("yxl,yxlm->yxm", qc, fprod))
    return 2.0 * msg


def _c_messages(qc, qm, kernels, cfg):
    """Pairwise part of the c-block cost for all pixels, shaped (H, W, N)."""
    n = qc.shape[-1]
    notc = 1.0 - qc
    msg = cfg.beta2 * kernels.g.apply(notc)
    if cfg.beta1 > 0:
        prod = (qm[..., :, None] * notc[..., None, :]).reshape(qc.shape[:2] + (2 * n,))
        f = kernels.g2.apply(np.concatenate([notc, prod], axis=-1))
        fprod = f[..., n:].reshape(qc.shape[:2] + (2, n))
        msg = msg + cfg.beta1 * (f[..., :n] - np.einsum("yxk,yxkl->yxl", qm, fprod))
    return 2.0 * msg


def _sequential_sweep(state, unary, kernels, cfg, block):
    """One raster-order pass of exact coordinate updates on one block."""
    h, w, n, _ = unary.shape
    qc = state.qc.reshape(h * w, n)
    qm = state.qm.reshape(h * w, 2)
    un = unary.reshape(h * w, n, 2)
    for p in range(h * w):
        g, g2 = kernels.joint_rows(p)
        g, g2 = g[0], g2[0]
        if block == "m":
            base = qc[p] @ un[p]
            notm = 1.0 - qm
            dc = 1.0 - qc @ qc[p]
            msg = cfg.beta3 * (g @ notm) + cfg.beta1 * ((g2 * dc) @ notm)
            qm[p] = softmax(-(base + 2.0 * msg))
        else:
            base = un[p] @ qm[p]
            notc = 1.0 - qc
            dm = 1.0 - qm @ qm[p]
            msg = cfg.beta2 * (g @ notc) + cfg.beta1 * ((g2 * dm) @ notc)
            qc[p] = softmax(-(base + 2.0 * msg))
    return state


def meanfield_block_update(state, block, unary, guide, cfg, kernels=None, iters=None):
    """Run ``iters`` mean-field sweeps on block ``"m"`` or ``"c"``.

    The other block's marginals stay fixed and enter the messages through
    the expected label disagreement ``1 - sum_l Q_p(l) Q_q(l)``.
    """
    if block not in ("m", "c"):
        raise ValueError(f"block must be 'm' or 'c', got {block!r}")
    kernels = kernels or Kernels(guide, cfg)
    iters = cfg.meanfield_iters_per_block if iters is None else iters
    unary = np.asarray(unary, dtype=np.float64)
    state = state.copy()
    sequential = cfg.effective_schedule == "sequential"
    if sequential and kernels.mode != "exact":
        raise ValueError("sequential sweeps need exact kernels")
    for _ in range(iters):
        if sequential:
            state = _sequential_sweep(state, unary, kernels, cfg, block)
            continue
        if block == "m":
            cost = np.einsum("yxc,yxcm->yxm", state.qc, unary) + _m_messages(
                state.qc, state.qm, kernels, cfg)
            new = softmax(-cost, axis=-1)
            state.qm = cfg.damping * state.qm + (1.0 - cfg.damping) * new
        else:
            cost = np.einsum("yxm,yxcm->yxc", state.qm, unary) + _c_messages(
                state.qc, state.qm, kernels, cfg)
            new = softmax(-cost, axis=-1)
            state.qc = cfg.damping * state.qc + (1.0 - cfg.damping) * new
    return state


# -- alternation ------------------------------------------------------------------------------

@dataclass
class AlternationResult:
    flow: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    state: MeanFieldState
    energies: list
    unary: np.ndarray


def alternate(unary, guide, cfg, maps=None, init=None, refresh=None, kernels=None):
    """Alternating m-block / c-block mean-field inference.

    Parameters
    ----------
    unary : ndarray, shape (H, W, N, 2)
        Joint unary costs.
    guide : ndarray
        Reference image providing the bilateral range feature.
    cfg : CrfConfig
    maps : ndarray, shape (N, H, W, 2), optional
        Candidate flow maps; the output flow picks ``maps[c_p]`` per pixel.
    init : MeanFieldState, optional
        Defaults to the marginals of ``softmax(-unary)``.
    refresh : callable, optional
        Called as ``refresh(state)`` after the first round; may return a new
        unary table (for instance with refitted color models) or None.

    Returns
    -------
    AlternationResult
        Hard labels, selected flow, mask, final state and the hard-label
        energy after every round.
    """
    unary = np.asarray(unary, dtype=np.float64)
    kernels = kernels or Kernels(guide, cfg)
    state = init.copy() if init is not None else initial_state(unary)
    energies = []
    for _ in range(cfg.alternations):
        state = meanfield_block_update(state, "m", unary, guide, cfg, kernels)
        state = meanfield_block_update(state, "c", unary, guide, cfg, kernels)
        state.t += 1
        c, m = state.hard_labels()
        energies.append(energy(c, m, unary, guide, cfg, kernels))
        log.info("alternation %d: energy %.6g", state.t, energies[-1])
        if state.t == 1 and refresh is not None:
            new = refresh(state)
            if new is not None:
                unary = np.asarray(new, dtype=np.float64)
    c, m = state.hard_labels()
    flow = None
    if maps is not None:
        maps = np.asarray(maps)
        flow = np.take_along_axis(np.moveaxis(maps, 0, 2), c[..., None, None], axis=2)[:, :, 0]
    return AlternationResult(flow, m.astype(np.uint8), c, state, energies, unary)
