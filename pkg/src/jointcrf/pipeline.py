"""End-to-end refinement: initial flow, candidate maps, unaries, CRF inference."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import densecrf, potentials, regional
from .config import PipelineConfig
from .imagecore import check_same_shape, clamp_probability

log = logging.getLogger(__name__)


def score_from_mask(mask, sigma=5.0):
    """Turn a rough 0/1 mask into a score map by Gaussian blurring and clamping."""
    blurred = ndimage.gaussian_filter(np.asarray(mask, dtype=np.float64), sigma, mode="nearest")
    return clamp_probability(blurred)


def default_uniform_box(shape):
    half = min(shape) / 4.0
    return (-half, half, -half, half)


@dataclass
class RefineResult:
    flow: np.ndarray
    mask: np.ndarray
    raw_flow: np.ndarray
    filtered_flow: np.ndarray
    init_mask: np.ndarray
    labels: np.ndarray
    candidates: regional.RegionalCorrespondenceSet
    energies: list
    timings: dict = field(default_factory=dict)

    @property
    def n_labels(self):
        return self.candidates.n


class _Stopwatch:
    def __init__(self):
        self.times = {}

    def __call__(self, name):
        watch = self

        class _Lap:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                watch.times[name] = watch.times.get(name, 0.0) + time.perf_counter() - self.t0

        return _Lap()


def initial_estimates(i1, i2, cfg):
    return regional.initial_flow(i1, i2, cfg.hs, cfg.wmf)


def build_candidates(i1, i2, filtered, cfg):
    if cfg.uniform_k is None:
        return regional.build_regional_set(i1, i2, cfg.regional, cfg.hs, cfg.wmf,
                                           filtered_flow=filtered)
    k = cfg.uniform_k
    box = cfg.uniform_box or default_uniform_box(i1.shape[:2])
    return regional.uniform_label_set(k, i1.shape[:2], box)


def refine(i1, i2, score, cfg=None):
    """Jointly refine correspondence and segmentation of an image pair.

    ``score`` is the foreground probability map of ``i1``.  Returns a
    :class:`RefineResult` with the selected flow, the mask and per-stage
    wall times in seconds.
    """
    cfg = cfg or PipelineConfig()
    check_same_shape(i1, i2, score, names=("I1", "I2", "score"))
    score = clamp_probability(score)
    watch = _Stopwatch()

    with watch("flow_init"):
        raw, filtered = initial_estimates(i1, i2, cfg)
    with watch("regional"):
        cands = build_candidates(i1, i2, filtered, cfg)
    log.info("%d candidate maps", cands.n)

    init_mask = (score >= 0.5).astype(np.uint8)
    with watch("unary"):
        hist = potentials.build_joint_histogram(
            filtered, init_mask, cfg.unary.bin_px, cfg.unary.hist_epsilon,
            flow_range=potentials.regional_flow_range(cands.maps))
        gmm = potentials.fit_color_model(i1, init_mask, cfg.gmm_fg_components,
                                         cfg.gmm_bg_components, seed=cfg.seed)
        table = potentials.assemble_unary(cands, hist, score, gmm, i1, i2, cfg.unary)

    def refresh(state):
        # Refit the color models on the current segmentation.
        _, m = state.hard_labels()
        new_gmm = potentials.fit_color_model(i1, m, cfg.gmm_fg_components,
                                             cfg.gmm_bg_components, seed=cfg.seed)
        seg = potentials.unary_segmentation(score, new_gmm, i1)
        return table.with_segmentation(seg).unary

    with watch("inference"):
        kernels = densecrf.Kernels(i1, cfg.crf)
        result = densecrf.alternate(table.unary, i1, cfg.crf, maps=cands.stack(),
                                    refresh=refresh if cfg.gmm_refresh else None,
                                    kernels=kernels)

    return RefineResult(result.flow, result.mask, raw, filtered, init_mask, result.labels,
                        cands, result.energies, watch.times)
