"""Primitive image operations shared by synthesis, the network and the diagnostics.

Images are float64 numpy arrays of shape (H, W, C) with values in [0, 1].
Single-channel images keep an explicit trailing axis of size 1.
"""
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import _backend

DEFAULT_GAMMA = 2.2

LAPLACIAN_KERNEL = np.array(
    [[0.0, -1.0, 0.0],
     [-1.0, 4.0, -1.0],
     [0.0, -1.0, 0.0]]
)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# "odd" extends the image by point reflection, f(-1) = 2 f(0) - f(1), which
# keeps affine ramps affine across the border.
PAD_MODES = ("reflect", "zero", "odd")


def as_image(img):
    """Coerce to a float64 (H, W, C) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    return arr


def gamma_correct(img, gamma=DEFAULT_GAMMA):
    """Map v -> v ** (1 / gamma)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.clip(as_image(img), 0.0, 1.0), 1.0 / gamma)


def inverse_gamma(img, gamma=DEFAULT_GAMMA):
    """Map v -> v ** gamma, the inverse of :func:`gamma_correct`."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.clip(as_image(img), 0.0, 1.0), gamma)


def pad(img, radius, mode="reflect"):
    img = as_image(img)
    if radius == 0:
        return img.copy()
    widths = ((radius, radius), (radius, radius), (0, 0))
    if mode == "reflect":
        return np.pad(img, widths, mode="reflect")
    if mode == "zero":
        return np.pad(img, widths, mode="constant")
    if mode == "odd":
        return np.pad(img, widths, mode="reflect", reflect_type="odd")
    raise ValueError(f"unknown pad mode {mode!r}; expected one of {PAD_MODES}")


def conv2d(img, kernel, pad_mode="reflect"):
    """Same-size, per-channel true convolution with an odd square kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square, got shape {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel.shape[0]}")
    padded = pad(img, kernel.shape[0] // 2, pad_mode)
    return _backend.convolve_padded(padded, kernel)


def _resize_axis(n_in, n_out):
    # Half-pixel centres (align_corners=False), edge-clamped source positions.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(img, scale=None, size=None):
    """Bilinear resampling by ``scale`` or to ``size=(height, width)``."""
    img = as_image(img)
    h, w = img.shape[:2]
    if size is None:
        if scale is None:
            raise ValueError("give either scale or size")
        size = (int(round(h * scale)), int(round(w * scale)))
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be at least 1x1, got {size}")
    r0, r1, fr = _resize_axis(h, out_h)
    c0, c1, fc = _resize_axis(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


# Responses below this are rounding residue (e.g. the Laplacian of a float ramp).
RESPONSE_FLOOR = 1e-10


def _normalize_by_max(response):
    peak = response.max() if response.size else 0.0
    if not peak > RESPONSE_FLOOR:
        return np.zeros_like(response)
    return response / peak


def laplacian_response(img):
    """Absolute Laplacian, max-reduced over channels (unnormalized)."""
    lap = conv2d(img, LAPLACIAN_KERNEL, pad_mode="odd")
    return np.abs(lap).max(axis=2, keepdims=True)


def laplacian_map(img):
    """Absolute Laplacian normalized by its per-image maximum, in [0, 1]."""
    return _normalize_by_max(laplacian_response(img))


def gradient_magnitude(img):
    """sqrt(dx^2 + dy^2) from forward differences, max-reduced over channels."""
    img = as_image(img)
    ext = pad(img, 1, "odd")[1:, 1:]  # odd extension one pixel past the bottom/right edge
    dx = ext[:-1, 1:] - ext[:-1, :-1]
    dy = ext[1:, :-1] - ext[:-1, :-1]
    return np.sqrt(dx * dx + dy * dy).max(axis=2, keepdims=True)


def edge_map(img):
    """Forward-difference gradient magnitude normalized to [0, 1]."""
    return _normalize_by_max(gradient_magnitude(img))


def to_grayscale(img):
    """Luma grayscale replicated to the input's channel count."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img.copy()
    luma = img[:, :, 0] * LUMA_WEIGHTS[0] + img[:, :, 1] * LUMA_WEIGHTS[1] + img[:, :, 2] * LUMA_WEIGHTS[2]
    return np.repeat(luma[:, :, None], img.shape[2], axis=2)


def pad_to_multiple(img, multiple=8):
    """Reflect-pad bottom/right so both dims divide ``multiple``; returns (padded, (h, w))."""
    img = as_image(img)
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if (ph < h and pw < w) else "symmetric"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode), (h, w)


def crop_to(img, size):
    return img[: size[0], : size[1]]


def read_png(path):
    """Read an 8-bit image as RGB float64 in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img):
    return np.round(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    """Write RGB (3 channels) or grayscale (1 channel) 8-bit PNG."""
    data = to_uint8(img)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0])
    elif data.shape[2] == 3:
        pil = PILImage.fromarray(data)
    else:
        raise ValueError(f"cannot write {data.shape[2]}-channel image")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")
