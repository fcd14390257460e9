"""Raster data model and file I/O.

Images are ``float64`` arrays scaled to ``[0, 1]``, shaped ``(H, W)`` for
grayscale and ``(H, W, 3)`` for color.  Flow fields are ``(H, W, 2)`` arrays
holding ``(u, v)``: pixel ``(x, y)`` of the reference image corresponds to
``(x + u, y + v)`` in the second image (x to the right, y down).  Masks are
``uint8`` arrays holding 0/1, score maps are ``float64`` foreground
probabilities.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

FLO_MAGIC = 202021.25
PROB_EPS = 1e-6

# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


class FormatError(ValueError):
    """Raised when a file does not hold the expected raster layout."""


def luminance(img):
    """Return the single-channel luminance of a grayscale or RGB image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def as_channels(img):
    """View an image as ``(H, W, C)``."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a)[:2] for a in arrays]
    if any(s != shapes[0] for s in shapes):
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"dimension mismatch between {label}: {shapes}")


def check_flow(flow):
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


def check_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask may only contain 0 and 1")
    return mask.astype(np.uint8)


# -- images -------------------------------------------------------------------

def load_image(path):
    """Load an 8- or 16-bit lossless raster as a float image in ``[0, 1]``.

    Grayscale files give ``(H, W)`` arrays and RGB files ``(H, W, 3)``.
    Files with alpha or two channels raise :class:`FormatError`.
    """
    path = Path(path)
    try:
        pil = PILImage.open(path)
        pil.load()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    mode = pil.mode
    if mode == "P":
        pil = pil.convert("RGBA" if "transparency" in pil.info else "RGB")
        mode = pil.mode
    if mode in ("1", "L"):
        data = np.asarray(pil, dtype=np.float64) / (1.0 if mode == "1" else 255.0)
    elif mode in ("I;16", "I;16B", "I;16L"):
        data = np.asarray(pil).astype(np.float64) / 65535.0
    elif mode == "I":
        # 16-bit PNGs are frequently decoded as 32-bit "I".
        data = np.asarray(pil).astype(np.float64) / 65535.0
    elif mode == "RGB":
        data = np.asarray(pil, dtype=np.float64) / 255.0
    else:
        raise FormatError(f"{path}: unsupported raster mode {mode!r} "
                          "(expected 1 or 3 channels)")
    if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
        raise FormatError(f"{path}: intensities outside the 16-bit range")
    return np.ascontiguousarray(data)


def save_image(path, img, bits=8):
    """Write an image as PNG.  16-bit output is only available for grayscale."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        if img.ndim != 2:
            raise ValueError("16-bit output supports grayscale images only")
        arr = np.round(img * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
        return
    arr = np.round(img * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path)


def load_mask(path):
    """Read a mask raster; any nonzero value is foreground."""
    img = load_image(path)
    return (luminance(img) >= 0.5).astype(np.uint8)


def save_mask(path, mask):
    mask = check_mask(mask)
    PILImage.fromarray((mask * 255).astype(np.uint8)).save(path)


# -- Middlebury .flo ----------------------------------------------------------

def write_flo(path, flow):
    """Write a flow field in the Middlebury ``.flo`` layout."""
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes(order="C"))


def read_flo(path):
    """Read a Middlebury ``.flo`` file into an ``(H, W, 2)`` float64 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} < {expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).astype(np.float64)


# -- portable float map --------------------------------------------------------

def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        kind, h, w = b"Pf", img.shape[0], img.shape[1]
    elif img.ndim == 3 and img.shape[2] == 3:
        kind, h, w = b"PF", img.shape[0], img.shape[1]
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got {img.shape}")
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # PFM scanlines run bottom to top.
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise FormatError(f"{path}: not a portable float map")
    channels = 1 if parts[0].strip() == b"Pf" else 3
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(parts[3]) < 4 * count:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(parts[3], dtype=dtype, count=count).astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].copy()


# -- score maps ---------------------------------------------------------------

def clamp_probability(prob, eps=PROB_EPS):
    return np.clip(np.asarray(prob, dtype=np.float64), eps, 1.0 - eps)


def read_score_map(path):
    """Read a foreground probability map, clamped so ``-log`` stays finite.

    Accepts a single-channel PFM (values taken as probabilities) or a
    single-channel 8/16-bit raster (scaled to ``[0, 1]``).
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head in (b"Pf", b"PF"):
        prob = read_pfm(path)
        if prob.ndim != 2:
            raise FormatError(f"{path}: score map must have a single channel")
    else:
        prob = load_image(path)
        if prob.ndim != 2:
            raise FormatError(f"{path}: score map must have a single channel")
    if not np.all(np.isfinite(prob)):
        raise FormatError(f"{path}: score map holds non-finite values")
    return clamp_probability(prob)


def write_score_map(path, prob):
    write_pfm(path, np.asarray(prob, dtype=np.float64))
