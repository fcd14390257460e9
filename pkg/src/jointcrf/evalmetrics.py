"""Flow and segmentation metrics, and a synthetic two-layer scene generator.

The generator renders band-limited random textures so that sub-pixel layer
shifts can be applied exactly in the Fourier domain.  It is the ground truth
used throughout the test suite.
"""

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .imagecore import check_same_shape, luminance


# -- metrics --------------------------------------------------------------------

def _valid_index(shape, valid):
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid).astype(bool)
    if valid.shape != shape:
        raise ValueError(f"valid mask shape {valid.shape} != {shape}")
    if not valid.any():
        raise ValueError("valid mask selects no pixels")
    return valid


def endpoint_error(flow, gt_flow):
    """Per-pixel Euclidean endpoint error."""
    check_same_shape(flow, gt_flow, names=("flow", "gt_flow"))
    d = np.asarray(flow, dtype=np.float64) - np.asarray(gt_flow, dtype=np.float64)
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def aepe(flow, gt_flow, valid=None):
    """Average endpoint error over ``valid`` pixels (all pixels if None)."""
    err = endpoint_error(flow, gt_flow)
    return float(err[_valid_index(err.shape, valid)].mean())


def aae(flow, gt_flow, valid=None):
    """Average angular error in degrees between ``(u, v, 1)`` vectors."""
    check_same_shape(flow, gt_flow, names=("flow", "gt_flow"))
    f = np.asarray(flow, dtype=np.float64)
    g = np.asarray(gt_flow, dtype=np.float64)
    a = np.concatenate([f, np.ones(f.shape[:2] + (1,))], axis=-1)
    b = np.concatenate([g, np.ones(g.shape[:2] + (1,))], axis=-1)
    # atan2 form: exact zero for identical vectors, accurate near 0 and 180 degrees.
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    ang = np.degrees(np.arctan2(cross, dot))
    return float(ang[_valid_index(ang.shape, valid)].mean())


def iou(mask, gt_mask):
    """Foreground intersection-over-union; 1.0 when both masks are empty."""
    check_same_shape(mask, gt_mask, names=("mask", "gt_mask"))
    a = np.asarray(mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# -- synthetic scenes -------------------------------------------------------------

_BG_COLOR = np.array([0.20, 0.30, 0.48])
_FG_COLOR = np.array([0.78, 0.58, 0.44])


def _as_pair(value, cast=float):
    if isinstance(value, str):
        value = value.replace("(", "").replace(")", "").split(",")
    return tuple(cast(v) for v in value)


@dataclass
class SyntheticSpec:
    """Parameters of a two-layer synthetic scene.

    ``foreground_box`` is ``(cx, cy, rx, ry)``: center and half extents of
    the foreground ellipse or rectangle in reference-image pixels; None
    centers a shape of half the frame width and two thirds of its height.
    ``textureless_band`` is ``(x0, y0, x1, y1)`` in reference coordinates;
    the foreground texture amplitude is zero there (the band moves with the
    foreground layer).  ``texture_cutoff`` is the radial frequency limit of
    the texture in cycles per pixel.
    """

    width: int = 128
    height: int = 128
    background_shift: tuple = (-2.0, 0.0)
    foreground_shift: tuple = (6.0, 0.0)
    foreground_shape: str = "ellipse"
    foreground_box: tuple = None
    texture_seed: int = 0
    texture_cutoff: float = 0.15
    texture_amplitude: float = 0.06
    textureless_band: tuple = None
    noise_sigma: float = 0.0
    color: bool = True

    def __post_init__(self):
        self.background_shift = _as_pair(self.background_shift)
        self.foreground_shift = _as_pair(self.foreground_shift)
        if self.foreground_box is not None:
            self.foreground_box = _as_pair(self.foreground_box)
        if self.textureless_band is not None:
            self.textureless_band = _as_pair(self.textureless_band)
        if self.foreground_shape not in ("ellipse", "rectangle"):
            raise ValueError(f"unknown foreground shape {self.foreground_shape!r}")
        limit = min(self.width, self.height) / 4.0
        for shift in (self.background_shift, self.foreground_shift):
            if max(abs(shift[0]), abs(shift[1])) > limit:
                raise ValueError(f"shift {shift} exceeds frame/4 = {limit}")

    @property
    def box(self):
        if self.foreground_box is not None:
            return self.foreground_box
        return (self.width / 2 - 0.5, self.height / 2 - 0.5,
                self.width / 4, self.height / 3)

    def to_text(self):
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown SyntheticSpec key {key!r}")
            kind = types[key]
            if value == "None":
                kwargs[key] = None
            elif kind in (int, "int"):
                kwargs[key] = int(value)
            elif kind in (float, "float"):
                kwargs[key] = float(value)
            elif kind in (bool, "bool"):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif kind in (tuple, "tuple"):
                kwargs[key] = _as_pair(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


class SyntheticPair(NamedTuple):
    i1: np.ndarray
    i2: np.ndarray
    flow: np.ndarray
    mask: np.ndarray
    valid: np.ndarray


def band_limited_noise(shape, cutoff, rng):
    """Zero-mean, unit-std Gaussian texture with no energy above ``cutoff``."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    keep = np.hypot(fx, fy) <= cutoff
    if not 0.0 < cutoff < 0.5:
        raise ValueError("cutoff must lie in (0, 0.5) cycles/pixel")
    spec = np.fft.fft2(rng.standard_normal(shape)) * keep
    field = np.fft.ifft2(spec).real
    field -= field.mean()
    std = field.std()
    return field / std if std > 0 else field


def spectral_shift(field, dx, dy):
    """Return ``field(x - dx, y - dy)`` under periodic boundary conditions.

    Exact for band-limited fields whose spectrum has no Nyquist component.
    """
    h, w = field.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    phase = np.exp(-2j * np.pi * (fx * dx + fy * dy))
    return np.fft.ifft2(np.fft.fft2(field) * phase).real


def _inside(spec, x, y):
    cx, cy, rx, ry = spec.box
    if spec.foreground_shape == "ellipse":
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
    return (np.abs(x - cx) <= rx) & (np.abs(y - cy) <= ry)


def _in_band(spec, x, y):
    if spec.textureless_band is None:
        return np.zeros(np.broadcast(x, y).shape, dtype=bool)
    x0, y0, x1, y1 = spec.textureless_band
    return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def _render(spec, bg_tex, fg_tex, bg_shift, fg_shift):
    h, w = spec.height, spec.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    amp = spec.texture_amplitude
    bg = spectral_shift(bg_tex, *bg_shift)
    fg = spectral_shift(fg_tex, *fg_shift)
    fx, fy = x - fg_shift[0], y - fg_shift[1]
    fg = np.where(_in_band(spec, fx, fy), 0.0, fg)
    inside = _inside(spec, fx, fy)
    img = np.where(inside[..., None],
                   _FG_COLOR + amp * fg[..., None],
                   _BG_COLOR + amp * bg[..., None])
    return img


def synthetic_pair(spec):
    """Render a reference/target pair with layer-wise constant ground truth.

    Returns ``(i1, i2, flow, mask, valid)``.  ``i1`` is color when
    ``spec.color`` is set and ``i2`` is always its grayscale counterpart (as
    with a color reference camera and a monochrome second camera).
    ``valid`` excludes pixels whose target leaves the frame or is covered by
    the foreground layer in the second image.
    """
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.texture_seed)
    bg_tex = band_limited_noise((h, w), spec.texture_cutoff, rng)
    fg_tex = band_limited_noise((h, w), spec.texture_cutoff, rng)

    img1 = _render(spec, bg_tex, fg_tex, (0.0, 0.0), (0.0, 0.0))
    img2 = _render(spec, bg_tex, fg_tex, spec.background_shift, spec.foreground_shift)

    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = _inside(spec, x, y)
    flow = np.empty((h, w, 2))
    flow[..., 0] = np.where(mask, spec.foreground_shift[0], spec.background_shift[0])
    flow[..., 1] = np.where(mask, spec.foreground_shift[1], spec.background_shift[1])

    tx, ty = x + flow[..., 0], y + flow[..., 1]
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    covered = _inside(spec, tx - spec.foreground_shift[0], ty - spec.foreground_shift[1])
    valid &= mask | ~covered

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng(spec.texture_seed + 7919)
        img1 = img1 + noise_rng.normal(0.0, spec.noise_sigma, img1.shape)
        img2 = img2 + noise_rng.normal(0.0, spec.noise_sigma, img2.shape)

    img1, img2 = np.clip(img1, 0.0, 1.0), np.clip(img2, 0.0, 1.0)
    i1 = img1 if spec.color else luminance(img1)
    i2 = luminance(img2)
    return SyntheticPair(i1, i2, flow, mask.astype(np.uint8), valid)


def perturbed_score_map(mask, sigma=5.0, flip_fraction=0.1, border_width=None, seed=0):
    """Simulate an imperfect segmentation score map from a ground-truth mask.

    A random ``flip_fraction`` of the border pixels (pixels within
    ``border_width`` of the mask boundary, default ``sigma``) have their label
    flipped, then the mask is Gaussian-blurred with ``sigma``.
    """
    mask = np.asarray(mask).astype(bool)
    if border_width is None:
        border_width = sigma
    rng = np.random.default_rng(seed)
    dist_in = ndimage.distance_transform_edt(mask)
    dist_out = ndimage.distance_transform_edt(~mask)
    border = np.where(mask, dist_in, dist_out) <= border_width
    flip = border & (rng.random(mask.shape) < flip_fraction)
    noisy = np.where(flip, ~mask, mask).astype(np.float64)
    return ndimage.gaussian_filter(noisy, sigma, mode="nearest")
