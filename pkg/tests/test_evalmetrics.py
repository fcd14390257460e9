import numpy as np
import pytest
from scipy import ndimage

from jointcrf import evalmetrics as em
from jointcrf._ops import warp
from jointcrf.imagecore import luminance


def _flow(h, w, u, v):
    f = np.empty((h, w, 2))
    f[..., 0], f[..., 1] = u, v
    return f


# -- metrics ----------------------------------------------------------------------------------

def test_aepe_cases(rng):
    gt = rng.normal(size=(6, 8, 2))
    assert em.aepe(gt, gt) == 0.0
    assert em.aepe(gt + np.array([3.0, 4.0]), gt) == pytest.approx(5.0, abs=1e-12)
    half = gt.copy()
    half[:, :4, 0] += 1.0
    assert em.aepe(half, gt) == pytest.approx(0.5, abs=1e-12)


def test_aepe_valid_mask(rng):
    gt = np.zeros((4, 4, 2))
    est = gt.copy()
    est[0, 0] = (30.0, 40.0)
    valid = np.ones((4, 4), dtype=bool)
    valid[0, 0] = False
    assert em.aepe(est, gt, valid) == 0.0
    with pytest.raises(ValueError):
        em.aepe(est, gt, np.zeros((4, 4)))


def test_aae_cases(rng):
    gt = rng.normal(size=(5, 5, 2))
    assert em.aae(gt, gt) == 0.0
    assert em.aae(_flow(3, 3, 1, 0), _flow(3, 3, 0, 1)) == pytest.approx(60.0, abs=1e-6)
    assert em.aae(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 0.0


def test_aae_agrees_with_arccos_formula(rng):
    f = rng.normal(size=(7, 7, 2)) * 3
    g = rng.normal(size=(7, 7, 2)) * 3
    num = f[..., 0] * g[..., 0] + f[..., 1] * g[..., 1] + 1
    den = np.sqrt((f ** 2).sum(-1) + 1) * np.sqrt((g ** 2).sum(-1) + 1)
    ref = np.degrees(np.arccos(np.clip(num / den, -1, 1))).mean()
    assert em.aae(f, g) == pytest.approx(ref, abs=1e-9)


def test_metric_dimension_mismatch():
    with pytest.raises(ValueError):
        em.aepe(np.zeros((3, 3, 2)), np.zeros((3, 4, 2)))
    with pytest.raises(ValueError):
        em.iou(np.zeros((3, 3)), np.zeros((4, 3)))


def test_iou_cases():
    full = np.ones((6, 6), dtype=np.uint8)
    left = np.zeros((6, 6), dtype=np.uint8)
    left[:, :3] = 1
    right = 1 - left
    assert em.iou(left, left) == 1.0
    assert em.iou(left, right) == 0.0
    assert em.iou(left, full) == 0.5
    assert em.iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_iou_symmetric_and_monotone(rng):
    a = rng.random((10, 10)) < 0.4
    b = rng.random((10, 10)) < 0.4
    assert em.iou(a, b) == em.iou(b, a)
    # adding correctly labeled pixels (pixels of b) to a never lowers the IoU
    grown = a.copy()
    for idx in np.flatnonzero(b & ~a):
        before = em.iou(grown, b)
        grown.flat[idx] = True
        assert em.iou(grown, b) >= before


# -- synthetic scenes -------------------------------------------------------------------------

def test_zero_shift_gives_identical_images():
    spec = em.SyntheticSpec(background_shift=(0, 0), foreground_shift=(0, 0), color=False)
    pair = em.synthetic_pair(spec)
    np.testing.assert_array_equal(pair.i1, pair.i2)
    np.testing.assert_array_equal(pair.flow, 0.0)


def test_zero_shift_color_reference_matches_luminance():
    pair = em.synthetic_pair(em.SyntheticSpec(background_shift=(0, 0), foreground_shift=(0, 0)))
    assert pair.i1.ndim == 3 and pair.i2.ndim == 2
    np.testing.assert_allclose(luminance(pair.i1), pair.i2, atol=1e-12)


def test_full_frame_rectangle_mask():
    spec = em.SyntheticSpec(width=32, height=24, foreground_shape="rectangle",
                            foreground_box=(15.5, 11.5, 16, 12))
    pair = em.synthetic_pair(spec)
    assert np.all(pair.mask == 1)
    np.testing.assert_array_equal(pair.flow[..., 0], 6.0)


def test_spectral_shift_round_trip(rng):
    tex = em.band_limited_noise((64, 48), 0.15, rng)
    back = em.spectral_shift(em.spectral_shift(tex, 2.5, 0.0), -2.5, 0.0)
    assert np.abs(back - tex).max() < 1e-6


def test_spectral_shift_integer_matches_roll(rng):
    tex = em.band_limited_noise((32, 32), 0.2, rng)
    np.testing.assert_allclose(em.spectral_shift(tex, 3, -2), np.roll(tex, (-2, 3), (0, 1)),
                               atol=1e-12)


def test_band_limited_noise_spectrum(rng):
    tex = em.band_limited_noise((64, 64), 0.1, rng)
    assert tex.mean() == pytest.approx(0.0, abs=1e-12)
    assert tex.std() == pytest.approx(1.0)
    spec = np.abs(np.fft.fft2(tex))
    fy = np.fft.fftfreq(64)[:, None]
    fx = np.fft.fftfreq(64)[None, :]
    assert spec[np.hypot(fx, fy) > 0.1].max() < 1e-9


@pytest.mark.parametrize("noise", [0.0, 0.01])
def test_backward_warp_reproduces_reference(noise):
    spec = em.SyntheticSpec(noise_sigma=noise)
    pair = em.synthetic_pair(spec)
    warped, outside = warp(pair.i2, pair.flow)
    fg = pair.mask.astype(bool)
    interior = (ndimage.binary_erosion(fg, iterations=3)
                | ndimage.binary_erosion(~fg, iterations=3)) & pair.valid & ~outside
    # stay clear of pixels whose target lies near the moved foreground edge
    moved_edge = ndimage.binary_dilation(~ndimage.binary_erosion(fg, iterations=1) & fg,
                                         iterations=12)
    interior &= ~moved_edge
    rms = np.sqrt(np.mean((warped[interior] - luminance(pair.i1)[interior]) ** 2))
    assert rms <= 2 * noise + 1e-3


def test_valid_mask_excludes_exits_and_disocclusions():
    pair = em.synthetic_pair(em.SyntheticSpec())
    # background moves left by 2: the first two columns leave the frame
    assert not pair.valid[:, :2].any()
    assert pair.valid.mean() > 0.8


def test_spec_text_round_trip():
    spec = em.SyntheticSpec(width=40, height=30, foreground_shift=(2.5, -1.0),
                            textureless_band=(1, 2, 3, 4), noise_sigma=0.01, color=False)
    back = em.SyntheticSpec.from_text(spec.to_text())
    assert back == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        em.SyntheticSpec(width=32, height=32, foreground_shift=(9.0, 0.0))
    with pytest.raises(ValueError):
        em.SyntheticSpec.from_text("bogus=1\n")
    with pytest.raises(ValueError):
        em.SyntheticSpec(foreground_shape="star")


def test_perturbed_score_map(two_layer):
    score = em.perturbed_score_map(two_layer.mask, sigma=5.0, flip_fraction=0.1, seed=0)
    assert score.min() >= 0 and score.max() <= 1
    thresh = score >= 0.5
    assert 0.9 < em.iou(thresh, two_layer.mask) < 1.0
    again = em.perturbed_score_map(two_layer.mask, sigma=5.0, flip_fraction=0.1, seed=0)
    np.testing.assert_array_equal(score, again)
