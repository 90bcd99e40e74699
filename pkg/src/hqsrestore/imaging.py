"""Image primitives: circular convolution, its adjoint, OTFs and PSNR.

Images are plain float64 arrays of shape ``(..., H, W)``; leading axes are
treated as a batch.  Intensities live in ``[0, peak]`` with ``peak = 255`` by
default and are never clamped by these routines.
"""

import numpy as np

from .errors import InputError

DEFAULT_PEAK = 255.0


def as_image(img, name="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise InputError(f"{name} must be at least 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def as_filter(filt, name="filter"):
    arr = np.asarray(filt, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InputError(f"{name} must be square 2-D, got shape {arr.shape}")
    if arr.shape[0] % 2 != 1:
        raise InputError(f"{name} size must be odd, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite taps")
    return arr


def _check_support(img, f):
    h, w = img.shape[-2:]
    if h < f or w < f:
        raise InputError(f"image {h}x{w} is smaller than the {f}x{f} filter")


def _wrap_pad(img, c):
    pad = [(0, 0)] * (img.ndim - 2) + [(c, c), (c, c)]
    return np.pad(img, pad, mode="wrap")


def convolve(img, filt, boundary="circular"):
    """2-D convolution with periodic boundary.

    ``out[y, x] = sum_{a,b} filt[a, b] * img[y - (a - c), x - (b - c)]`` with
    ``c = f // 2`` and indices taken modulo the image size, so the operator is
    block-circulant and diagonalized by the 2-D DFT (see :func:`psf_to_otf`).
    """
    if boundary != "circular":
        raise InputError(f"unsupported boundary mode {boundary!r}; only 'circular' is implemented")
    img = np.asarray(img, dtype=np.float64)
    filt = as_filter(filt)
    f = filt.shape[0]
    _check_support(img, f)
    c = f // 2
    h, w = img.shape[-2:]
    padded = _wrap_pad(img, c)
    out = np.zeros_like(img)
    for a in range(f):
        for b in range(f):
            out += filt[a, b] * padded[..., 2 * c - a:2 * c - a + h, 2 * c - b:2 * c - b + w]
    return out


def convolve_transpose(img, filt):
    """Adjoint of :func:`convolve` (circular correlation with ``filt``)."""
    img = np.asarray(img, dtype=np.float64)
    filt = as_filter(filt)
    f = filt.shape[0]
    _check_support(img, f)
    c = f // 2
    h, w = img.shape[-2:]
    padded = _wrap_pad(img, c)
    out = np.zeros_like(img)
    for a in range(f):
        for b in range(f):
            out += filt[a, b] * padded[..., a:a + h, b:b + w]
    return out


def filter_gradient(img, upstream, size):
    """Gradient of ``<upstream, convolve(img, filt)>`` with respect to the taps.

    Sums over every leading batch axis; returns a ``size x size`` array.
    """
    img = np.asarray(img, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if img.shape != upstream.shape:
        raise InputError(f"shape mismatch {img.shape} vs {upstream.shape}")
    _check_support(img, size)
    c = size // 2
    h, w = img.shape[-2:]
    padded = _wrap_pad(img, c)
    grad = np.empty((size, size))
    for a in range(size):
        for b in range(size):
            grad[a, b] = np.sum(upstream * padded[..., 2 * c - a:2 * c - a + h, 2 * c - b:2 * c - b + w])
    return grad


def psf_to_otf(psf, shape):
    """DFT of the kernel embedded at the origin with wraparound.

    ``np.fft.fft2(convolve(x, psf)) == psf_to_otf(psf, x.shape) * np.fft.fft2(x)``.
    """
    psf = as_filter(psf, "psf")
    h, w = shape[-2:]
    f = psf.shape[0]
    if f > h or f > w:
        raise InputError(f"psf {f}x{f} does not fit a {h}x{w} image")
    c = f // 2
    big = np.zeros((h, w))
    big[:f, :f] = psf
    big = np.roll(big, (-c, -c), axis=(0, 1))
    return np.fft.fft2(big)


def circulant_matrix(filt, shape):
    """Dense matrix of :func:`convolve` on row-major flattened images (small shapes only)."""
    h, w = shape
    n = h * w
    mat = np.empty((n, n))
    eye = np.zeros((h, w))
    for j in range(n):
        eye.flat[j] = 1.0
        mat[:, j] = convolve(eye, filt).ravel()
        eye.flat[j] = 0.0
    return mat


def psnr(test, reference, peak=DEFAULT_PEAK, crop=0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images.

    ``crop`` discards that many pixels on every border before comparing.
    """
    test = np.asarray(test, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if test.shape != reference.shape:
        raise InputError(f"psnr shape mismatch: {test.shape} vs {reference.shape}")
    if peak <= 0:
        raise InputError("peak must be positive")
    if crop:
        test = test[..., crop:-crop, crop:-crop]
        reference = reference[..., crop:-crop, crop:-crop]
    mse = np.mean((test - reference) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))
