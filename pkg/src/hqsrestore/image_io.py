"""Grayscale image and kernel files: binary PGM (P5), PNG, and text grids."""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InputError
from .imaging import DEFAULT_PEAK


def _read_token(buf, pos):
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise InputError("truncated PGM header")
    return buf[start:pos], pos


def read_pgm(path):
    """Return ``(raw, maxval)`` for a binary P5 file; ``raw`` is an integer array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise InputError(f"{path}: not a binary PGM (magic {magic!r})")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if not 0 < maxval < 65536:
        raise InputError(f"{path}: invalid maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(buf) - pos < count * dtype.itemsize:
        raise InputError(f"{path}: truncated PGM payload")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(height, width)
    return raw.astype(np.int64), maxval


def write_pgm(path, raw, maxval=255):
    raw = np.asarray(raw)
    height, width = raw.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw.astype(dtype).tobytes())


def quantize(img, peak=DEFAULT_PEAK, bits=8):
    """Map ``[0, peak]`` floats to integers with round-half-up and clamping."""
    maxval = (1 << bits) - 1
    scaled = np.asarray(img, dtype=np.float64) * (maxval / peak)
    return np.clip(np.floor(scaled + 0.5), 0, maxval).astype(np.int64)


def dequantize(raw, maxval, peak=DEFAULT_PEAK):
    return np.asarray(raw, dtype=np.float64) * (peak / maxval)


def load_image(path, peak=DEFAULT_PEAK):
    """Read a grayscale PGM or PNG into a float array in ``[0, peak]``.

    Color PNGs are converted to luminance.
    """
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        raw, maxval = read_pgm(path)
        return dequantize(raw, maxval, peak)
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            raw = np.asarray(im, dtype=np.int64)
            maxval = 65535
        else:
            raw = np.asarray(im.convert("L"), dtype=np.int64)
            maxval = 255
    return dequantize(raw, maxval, peak)


def load_channels(path, peak=DEFAULT_PEAK):
    """Like :func:`load_image` but keeps RGB channels separate; returns a list of 2-D arrays."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return [load_image(path, peak)]
    with PILImage.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            raw = np.asarray(im.convert("RGB"), dtype=np.int64)
            return [dequantize(raw[..., c], 255, peak) for c in range(3)]
    return [load_image(path, peak)]


def save_channels(path, channels, peak=DEFAULT_PEAK):
    if len(channels) == 1:
        save_image(path, channels[0], peak)
        return
    raw = np.stack([quantize(c, peak, 8) for c in channels], axis=-1)
    PILImage.fromarray(raw.astype(np.uint8), mode="RGB").save(path)


def save_image(path, img, peak=DEFAULT_PEAK, bits=8):
    path = Path(path)
    if bits not in (8, 16):
        raise InputError("bits must be 8 or 16")
    raw = quantize(img, peak, bits)
    if path.suffix.lower() in (".pgm", ".pnm"):
        write_pgm(path, raw, (1 << bits) - 1)
    elif bits == 8:
        PILImage.fromarray(raw.astype(np.uint8), mode="L").save(path)
    else:
        PILImage.fromarray(raw.astype(np.uint16)).save(path)


def load_kernel(path):
    """Read a PSF from a whitespace-separated text grid or a PGM (normalized to unit sum)."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm", ".png"):
        kernel = load_image(path, peak=1.0)
        total = kernel.sum()
        if total <= 0:
            raise InputError(f"{path}: kernel image sums to zero")
        kernel = kernel / total
    else:
        kernel = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise InputError(f"{path}: kernel must be square and odd-sized, got {kernel.shape}")
    return kernel


def save_kernel(path, kernel):
    np.savetxt(path, np.asarray(kernel, dtype=np.float64), fmt="%.17g")


def load_mask(path):
    """PGM/PNG mask where 0 marks a missing pixel."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        raw, _ = read_pgm(path)
    else:
        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("L"))
    return (raw != 0).astype(np.float64)


def save_mask(path, mask):
    raw = (np.asarray(mask) != 0).astype(np.int64) * 255
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        write_pgm(path, raw, 255)
    else:
        PILImage.fromarray(raw.astype(np.uint8), mode="L").save(path)
