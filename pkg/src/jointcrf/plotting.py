"""Flow and mask visualizations written as image files."""

import numpy as np

from .imagecore import as_channels, check_flow, luminance

# Middlebury color wheel segment lengths: red-yellow, yellow-green, green-cyan,
# cyan-blue, blue-magenta, magenta-red.
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel():
    """The 55-entry RGB color wheel in [0, 1], starting at red."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    wheel = np.zeros((sum(_SEGMENTS), 3))
    col = 0
    ramps = ((ry, 0, 1, +1), (yg, 1, 0, -1), (gc, 1, 2, +1),
             (cb, 2, 1, -1), (bm, 2, 0, +1), (mr, 0, 2, -1))
    for n, full, other, direction in ramps:
        t = np.arange(n) / n
        wheel[col:col + n, full] = 1.0
        wheel[col:col + n, other] = t if direction > 0 else 1.0 - t
        col += n
    return wheel


def default_max_flow(flow, percentile=99.0):
    mag = np.hypot(flow[..., 0], flow[..., 1])
    finite = mag[np.isfinite(mag)]
    if finite.size == 0:
        return 1.0
    return max(float(np.percentile(finite, percentile)), 1e-9)


def flow_to_color(flow, max_flow=None):
    """Encode flow as RGB: hue from direction, saturation from magnitude.

    Magnitudes are divided by ``max_flow`` (the 99th-percentile magnitude
    when None) and values beyond 1 are darkened.  Non-finite vectors
    render black.
    """
    check_flow(flow)
    u, v = flow[..., 0].copy(), flow[..., 1].copy()
    bad = ~(np.isfinite(u) & np.isfinite(v))
    u[bad] = 0.0
    v[bad] = 0.0
    if max_flow is None:
        max_flow = default_max_flow(np.stack([u, v], axis=-1))
    u, v = u / max_flow, v / max_flow
    rad = np.hypot(u, v)
    wheel = color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1.0 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    inside = r <= 1.0
    col = np.where(inside, 1.0 - r * (1.0 - col), col * 0.75)
    col[bad] = 0.0
    return np.clip(col, 0.0, 1.0)


def mask_overlay(img, mask, color=(1.0, 0.2, 0.2), alpha=0.5):
    """Tint foreground pixels of ``img`` and draw the mask outline."""
    base = as_channels(img)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    m = np.asarray(mask).astype(bool)
    out = base.copy()
    tint = np.asarray(color, dtype=np.float64)
    out[m] = (1.0 - alpha) * out[m] + alpha * tint
    edge = m & ~_erode(m)
    out[edge] = tint
    return out


def _erode(m):
    padded = np.pad(m, 1, mode="edge")
    return (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
            & padded[1:-1, :-2] & padded[1:-1, 2:])


def save_summary_figure(path, i1, init_flow, flow, init_mask, mask, max_flow=None, dpi=100):
    """Save a 2x3 panel figure comparing initial and refined estimates."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if max_flow is None:
        max_flow = default_max_flow(flow)
    panels = [
        ("reference", as_channels(i1) if np.ndim(i1) == 3 else luminance(i1)),
        ("initial flow", flow_to_color(init_flow, max_flow)),
        ("refined flow", flow_to_color(flow, max_flow)),
        ("color wheel", flow_to_color(_wheel_flow(64), 1.0)),
        ("initial mask", mask_overlay(i1, init_mask)),
        ("refined mask", mask_overlay(i1, mask)),
    ]
    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    for ax, (title, img) in zip(axes.ravel(), panels):
        ax.imshow(img, cmap="gray" if np.ndim(img) == 2 else None, vmin=0, vmax=1)
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def _wheel_flow(size):
    t = np.linspace(-1.0, 1.0, size)
    u, v = np.meshgrid(t, t)
    return np.stack([u, v], axis=-1)
