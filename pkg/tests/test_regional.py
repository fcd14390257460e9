import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcrf import evalmetrics as em
from jointcrf import regional as R
from jointcrf.regional import RegionMap, RegionalParams


def _is_4_connected(mask):
    from scipy import ndimage
    _, n = ndimage.label(mask)
    return n == 1


def _check_region_map(rm):
    ids = np.unique(rm.labels)
    assert set(ids) <= set(range(rm.count + 1))
    assert set(range(1, rm.count + 1)) <= set(ids)
    for i in range(1, rm.count + 1):
        assert _is_4_connected(rm.labels == i)


# -- partition ----------------------------------------------------------------------------

def test_partition_two_halves(rng):
    flow = np.zeros((40, 40, 2))
    flow[:, 20:, 0] = 6.0
    rm = R.partition_regions(flow, rng.random((40, 40)))
    assert rm.count == 2
    assert len(np.unique(rm.labels[:, :20])) == 1
    assert len(np.unique(rm.labels[:, 20:])) == 1
    assert rm.labels[0, 0] != rm.labels[0, 39]
    _check_region_map(rm)


def test_partition_constant_flow_is_one_region(rng):
    flow = np.full((30, 30, 2), 2.0)
    rm = R.partition_regions(flow, rng.random((30, 30)))
    assert rm.count == 1
    assert np.all(rm.labels == 1)


def test_partition_three_noisy_bands():
    rng = np.random.default_rng(0)
    h = w = 96
    band = np.zeros((h, w), dtype=int)
    band[32:64], band[64:] = 1, 2
    flow = np.zeros((h, w, 2))
    flow[band == 1] = (5.0, 0.0)
    flow[band == 2] = (0.0, 4.0)
    flow += rng.normal(0.0, 0.1, flow.shape)
    rm = R.partition_regions(flow, rng.random((h, w)))
    assert rm.count == 3
    for i in range(1, 4):
        sel = rm.labels == i
        purity = np.bincount(band[sel], minlength=3).max() / sel.sum()
        assert purity >= 0.9
    _check_region_map(rm)


def test_partition_dimension_mismatch():
    with pytest.raises(ValueError):
        R.partition_regions(np.zeros((8, 8, 2)), np.zeros((8, 9)))


# -- merge and filter ----------------------------------------------------------------------

def test_merge_similar_neighbors():
    labels = np.ones((20, 20), dtype=np.int64)
    labels[:, 10:] = 2
    flow = np.zeros((20, 20, 2))
    flow[:, :10, 0], flow[:, 10:, 0] = 2.0, 2.5
    out = R.merge_and_filter(RegionMap(labels, 2), flow)
    assert out.count == 1
    assert np.all(out.labels == 1)


def test_tiny_outlier_discarded():
    labels = np.ones((128, 128), dtype=np.int64)
    labels[60:64, 60:64] = 2  # 16 px = 0.1% of the frame
    flow = np.zeros((128, 128, 2))
    flow[labels == 2] = (40.0, 40.0)
    out = R.merge_and_filter(RegionMap(labels, 2), flow)
    assert out.count == 1
    assert np.all(out.labels[60:64, 60:64] == 0)
    assert np.all(out.labels[labels == 1] == 1)


def test_region_cap_keeps_n_max_minus_one():
    h, w = 120, 120
    labels = np.repeat(np.arange(1, 13), 10)[:, None].repeat(w, axis=1)
    flow = np.zeros((h, w, 2))
    flow[..., 0] = 3.0 * (labels - 1)
    out = R.merge_and_filter(RegionMap(labels, 12), flow, RegionalParams(n_max=10))
    assert out.count == 9
    _check_region_map(out)
    assert np.all(out.labels > 0)


def test_merge_order_smallest_pair_first():
    # means 0, 1.0, 1.2: the (1.0, 1.2) pair merges first; the merged mean 1.1
    # is then within 1.5 of region 1, so all three end in one region.
    labels = np.repeat(np.arange(1, 4), 10)[:, None].repeat(30, axis=1)
    flow = np.zeros((30, 30, 2))
    flow[..., 0] = np.array([0.0, 1.0, 1.2])[labels - 1]
    out = R.merge_and_filter(RegionMap(labels, 3), flow, RegionalParams(merge_threshold=1.5))
    assert out.count == 1


# -- propagation ---------------------------------------------------------------------------

def test_propagate_full_support_is_identity(rng):
    flow = rng.normal(size=(17, 23, 2))
    np.testing.assert_array_equal(R.propagate_region(flow, np.ones((17, 23))), flow)


def test_propagate_constant_extension():
    flow = np.zeros((33, 40, 2))
    flow[:, :20] = (3.0, 0.0)
    support = np.zeros((33, 40), dtype=bool)
    support[:, :20] = True
    out = R.propagate_region(flow, support)
    assert np.abs(out - np.array([3.0, 0.0])).max() < 1e-6


def test_propagate_strip_midpoint():
    flow = np.zeros((1, 65, 2))
    flow[0, 64] = (8.0, 0.0)
    support = np.zeros((1, 65), dtype=bool)
    support[0, 0] = support[0, 64] = True
    u_mid = R.propagate_region(flow, support)[0, 32, 0]
    assert 3.0 <= u_mid <= 5.0
    assert u_mid == pytest.approx(4.0, abs=1e-9)


def test_propagate_empty_support():
    with pytest.raises(ValueError):
        R.propagate_region(np.zeros((4, 4, 2)), np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 2 ** 31 - 1))
def test_propagate_interpolates_on_support(h, w, seed):
    rng = np.random.default_rng(seed)
    flow = rng.normal(size=(h, w, 2)) * 5
    support = rng.random((h, w)) < 0.3
    support.flat[rng.integers(h * w)] = True
    out = R.propagate_region(flow, support)
    np.testing.assert_array_equal(out[support], flow[support])
    assert np.all(np.isfinite(out))
    lo, hi = flow[support].min(axis=0), flow[support].max(axis=0)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


# -- sub-pixel refinement -------------------------------------------------------------------

def _texture(n, seed=0):
    rng = np.random.default_rng(seed)
    return 0.5 + 0.12 * em.band_limited_noise((n, n), 0.15, rng)


def test_refine_fixed_point_identical_images():
    img = _texture(48)
    out = R.refine_subpixel(np.zeros((48, 48, 2)), img, img)
    assert np.abs(out).max() < 1e-4


def test_refine_improves_subpixel_shift():
    tex = _texture(64)
    moved = em.spectral_shift(tex, 2.5, 0.0)
    gt = np.zeros((64, 64, 2))
    gt[..., 0] = 2.5
    w0 = np.zeros_like(gt)
    w0[..., 0] = 2.0
    w1 = R.refine_subpixel(w0, tex, moved)
    inner = np.zeros((64, 64), dtype=bool)
    inner[6:-6, 6:-6] = True
    assert em.aepe(w1, gt, inner) < em.aepe(w0, gt, inner)
    assert np.abs(w1 - w0).max() <= 1.0 + 1e-9


def test_refine_textureless_unchanged(rng):
    img = np.full((32, 32), 0.3)
    w = rng.normal(size=(32, 32, 2))
    assert np.abs(R.refine_subpixel(w, img, img) - w).max() < 1e-4


# -- full candidate set ------------------------------------------------------------------

def test_constant_shift_pair_gives_one_candidate():
    pair = em.synthetic_pair(em.SyntheticSpec(background_shift=(3.0, 0.0),
                                              foreground_shift=(3.0, 0.0)))
    rcs = R.build_regional_set(pair.i1, pair.i2)
    assert rcs.n == 1
    assert em.aepe(rcs.maps[0], pair.flow, pair.valid) < 0.5


def test_two_layer_pair_candidates(two_layer):
    pair = two_layer
    rcs = R.build_regional_set(pair.i1, pair.i2)
    assert rcs.n == 2
    fg = pair.mask.astype(bool)
    med = [np.median(m[..., 0]) for m in rcs.maps]
    w_fg, w_bg = rcs.maps[int(np.argmax(med))], rcs.maps[int(np.argmin(med))]
    assert em.aepe(w_fg, pair.flow, fg & pair.valid) < 0.5
    assert em.aepe(w_bg, pair.flow, ~fg & pair.valid) < 0.5


def test_candidate_set_invariants(two_layer):
    pair = two_layer
    rcs = R.build_regional_set(pair.i1, pair.i2, RegionalParams(refine_subpixel=False))
    assert 1 <= rcs.n <= 10
    total = np.zeros(pair.mask.shape, dtype=int)
    for w, s in zip(rcs.maps, rcs.supports):
        s = s.astype(bool)
        assert np.all(np.isfinite(w))
        np.testing.assert_array_equal(w[s], rcs.source_flow[s])
        total += s
    assert total.max() <= 1  # disjoint supports
    assert not np.any(total.astype(bool) & (rcs.regions.labels == 0))
    _check_region_map(rcs.regions)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_n_max_respected(seed):
    rng = np.random.default_rng(seed)
    i1 = rng.random((48, 48))
    i2 = rng.random((48, 48))
    for n_max in (1, 3, 10):
        assert R.build_regional_set(i1, i2, RegionalParams(n_max=n_max)).n <= n_max


def _nearest_candidate_distance(pair):
    rcs = R.build_regional_set(pair.i1, pair.i2)
    return np.min([np.hypot(*(m - pair.flow).transpose(2, 0, 1)) for m in rcs.maps], axis=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_near_correct_candidate_almost_everywhere(seed):
    pair = em.synthetic_pair(em.SyntheticSpec(texture_seed=seed))
    d = _nearest_candidate_distance(pair)
    assert (d >= 1.0).mean() < 0.01


@pytest.mark.xfail(strict=True, reason=(
    "0.1-0.6% of pixels, on the layer boundary and the occluded strip, have no candidate "
    "within 1 px after sub-pixel refinement"))
def test_near_correct_candidate_everywhere(two_layer):
    assert np.all(_nearest_candidate_distance(two_layer) < 1.0)


def test_uniform_label_set():
    rcs = R.uniform_label_set(9, (5, 6), (-4.0, 4.0, -2.0, 2.0))
    assert rcs.n == 9
    pts = sorted({tuple(m[0, 0]) for m in rcs.maps})
    assert len(pts) == 9
    assert min(p[0] for p in pts) == -4.0 and max(p[1] for p in pts) == 2.0
    for m in rcs.maps:
        assert np.all(m == m[0, 0])
