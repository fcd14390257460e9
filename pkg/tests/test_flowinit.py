import numpy as np
import pytest

from jointcrf import evalmetrics as em
from jointcrf.flowinit import HsParams, WmfParams, default_levels, horn_schunck, \
    weighted_median_refine


def _texture(n, seed=0):
    rng = np.random.default_rng(seed)
    return 0.5 + 0.12 * em.band_limited_noise((n, n), 0.15, rng)


def _interior_aepe(flow, shift, margin):
    gt = np.zeros_like(flow)
    gt[..., 0] = shift
    sl = (slice(margin, -margin), slice(margin, -margin))
    return em.aepe(flow[sl], gt[sl])


def test_identical_images_give_near_zero_flow():
    tex = _texture(64)
    flow = horn_schunck(tex, tex)
    assert np.abs(flow).max() < 0.05


def test_circular_shift_recovered():
    tex = _texture(64)
    flow = horn_schunck(tex, np.roll(tex, 3, axis=1))
    assert _interior_aepe(flow, 3.0, 8) < 0.5


def test_constant_images_give_zero_flow():
    img = np.full((32, 32), 0.4)
    np.testing.assert_array_equal(horn_schunck(img, img), 0.0)


def test_global_intensity_offset_invariance():
    tex = _texture(64)
    moved = np.roll(tex, 3, axis=1)
    a = horn_schunck(tex, moved)
    b = horn_schunck(tex + 0.1, moved + 0.1)
    assert np.abs(a - b).max() < 1e-6


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        horn_schunck(np.zeros((8, 8)), np.zeros((8, 9)))


def test_default_levels_keep_coarsest_side_16():
    assert default_levels((64, 64)) == 3
    assert default_levels((128, 96)) == 3
    assert default_levels((15, 15)) == 1


def test_invalid_params():
    with pytest.raises(ValueError):
        HsParams(smoothness_alpha=0)
    with pytest.raises(ValueError):
        WmfParams(radius=0)


SHIFT_SUITE = [(64, 5), (64, 6), (64, 8), (64, 10), (128, 5), (128, 6), (128, 8), (128, 10)]


def _level_sweep(n, shift):
    tex = _texture(n)
    moved = np.roll(tex, shift, axis=1)
    return [_interior_aepe(horn_schunck(tex, moved, HsParams(pyramid_levels=lv)), shift, 12)
            for lv in range(1, default_levels((n, n)) + 1)]


@pytest.mark.parametrize("n,shift", SHIFT_SUITE)
def test_default_pyramid_beats_single_level(n, shift):
    errs = _level_sweep(n, shift)
    assert errs[-1] <= min(errs)
    assert errs[-1] < 0.5


@pytest.mark.xfail(strict=True, reason=(
    "for 8-10 px shifts both the 1- and 2-level pyramids fail outright (AEPE close to the "
    "shift) and the 2-level estimate is up to 0.3 px worse; the sequence is non-increasing "
    "from the first level that captures the motion"))
def test_aepe_non_increasing_over_levels():
    for n, shift in SHIFT_SUITE:
        errs = _level_sweep(n, shift)
        assert all(b <= a for a, b in zip(errs, errs[1:])), (n, shift, errs)


# -- weighted median ------------------------------------------------------------------

def test_wmf_constant_flow_unchanged(rng):
    flow = np.zeros((12, 12, 2))
    flow[..., 0], flow[..., 1] = 1.25, -3.0
    np.testing.assert_array_equal(weighted_median_refine(flow, rng.random((12, 12))), flow)


def test_wmf_removes_outlier():
    flow = np.zeros((15, 15, 2))
    flow[7, 7] = (30.0, 30.0)
    out = weighted_median_refine(flow, np.full((15, 15), 0.5))
    np.testing.assert_array_equal(out, 0.0)


def _brute_wmf(flow, guide, y, x, params):
    r = params.radius
    h, w = flow.shape[:2]
    g = guide if guide.ndim == 3 else guide[..., None]
    vals, wts = [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            qy, qx = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
            diff = g[qy, qx] - g[y, x]
            wts.append(np.exp(-(dx * dx + dy * dy) / params.sigma_spatial ** 2
                              - np.sum(diff * diff) / params.sigma_range ** 2))
            vals.append(flow[qy, qx])
    vals, wts = np.array(vals), np.array(wts)
    out = []
    for c in range(2):
        order = np.argsort(vals[:, c], kind="stable")
        cum = np.cumsum(wts[order])
        out.append(vals[order, c][np.searchsorted(cum, 0.5 * wts.sum())])
    return np.array(out)


@pytest.mark.parametrize("color", [False, True])
def test_wmf_matches_brute_force_probe(color):
    rng = np.random.default_rng(7)
    flow = rng.normal(size=(9, 9, 2)) * 3
    guide = rng.random((9, 9, 3) if color else (9, 9))
    params = WmfParams(radius=3, sigma_spatial=3.0, sigma_range=0.3)
    out = weighted_median_refine(flow, guide, params)
    for y, x in [(4, 4), (0, 0), (8, 3), (2, 7)]:
        np.testing.assert_array_equal(out[y, x], _brute_wmf(flow, guide, y, x, params))


def test_wmf_idempotent_on_aligned_piecewise_constant():
    guide = np.zeros((24, 24))
    guide[:, 12:] = 1.0
    flow = np.zeros((24, 24, 2))
    flow[:, 12:] = (6.0, -1.0)
    once = weighted_median_refine(flow, guide)
    np.testing.assert_array_equal(once, flow)
    np.testing.assert_array_equal(weighted_median_refine(once, guide), once)
