"""Small numerical helpers shared by the flow modules."""

import numpy as np
from scipy import ndimage, sparse

# Five-point central derivative.
DERIV5 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def sample_bilinear(img, x, y):
    """Bilinearly sample ``img`` at float coordinates, replicating borders.

    Returns the samples and a boolean array marking coordinates that fall
    outside ``[0, W-1] x [0, H-1]``.
    """
    h, w = img.shape[:2]
    outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    coords = np.stack([y, x])
    if img.ndim == 2:
        out = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    else:
        out = np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest")
                        for c in range(img.shape[2])], axis=-1)
    return out, outside


def warp(img, flow):
    """Sample ``img`` at ``p + flow_p`` for every pixel ``p``."""
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(img, xx + flow[..., 0], yy + flow[..., 1])


def resize(arr, shape):
    """Bilinear resize of a 2D array with pixel-center alignment."""
    h, w = arr.shape
    nh, nw = shape
    if (nh, nw) == (h, w):
        return arr.copy()
    y = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    x = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return ndimage.map_coordinates(arr, [yy, xx], order=1, mode="nearest")


def deriv(img, axis):
    return ndimage.correlate1d(img, DERIV5, axis=axis, mode="nearest")


def central_gradient(img):
    """Central differences ``(d/dx, d/dy)`` with replicated borders."""
    gx = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
    gy = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    return gx, gy


def grid_laplacian(h, w, wx=None, wy=None):
    """Graph Laplacian ``D - A`` of the 4-connected ``h x w`` grid.

    ``wx[y, x]`` weights the edge between ``(x, y)`` and ``(x+1, y)``;
    ``wy[y, x]`` the edge between ``(x, y)`` and ``(x, y+1)``.  Unit weights
    by default.  Reflecting (Neumann) boundaries are implicit.
    """
    n = h * w
    idx = np.arange(n).reshape(h, w)
    if wx is None:
        wx = np.ones((h, w - 1))
    else:
        wx = wx[:, : w - 1]
    if wy is None:
        wy = np.ones((h - 1, w))
    else:
        wy = wy[: h - 1, :]
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    vals = np.concatenate([wx.ravel(), wy.ravel()])
    adj = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sparse.diags(deg) - adj).tocsr()
