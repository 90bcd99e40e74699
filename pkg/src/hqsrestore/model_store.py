"""Versioned binary model files and a matching text export.

Binary layout (little-endian)::

    magic      8 bytes   b"HQSPRIOR"
    version    u32
    header     u64 length, then u32 K, N, f, M and f64 extent, bandwidth, peak
    coeffs     u64 length, then K*N*(f*f-1) f64   (DCT coefficients, stage-major)
    weights    u64 length, then K*N*M f64         (RBF weights, stage-major)
    lambdas    u64 length, then u32 count and per entry
               u32 name length, UTF-8 name, f64 log(lambda), sorted by name
    metadata   u64 length, then UTF-8 JSON
    checksum   32 bytes  SHA-256 of everything above
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    HeaderInconsistencyError,
    ModelFormatError,
    UnsupportedVersionError,
)
from .params import ModelParams
from .prior import DiffusionStage, PriorProx
from .rbf import RbfGrid

MAGIC = b"HQSPRIOR"
VERSION = 1
_HEADER = struct.Struct("<4I3d")
_DIGEST = 32


def _section(payload):
    return struct.pack("<Q", len(payload)) + payload


def _f64(values):
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def to_bytes(model):
    prior = model.prior
    grid = prior.grid
    header = _HEADER.pack(prior.n_stages, prior.n_filters, prior.size, grid.count,
                          grid.extent, grid.bandwidth, model.peak)
    coeffs = _f64(np.concatenate([s.coeffs.ravel() for s in prior.stages]))
    weights = _f64(np.concatenate([s.weights.ravel() for s in prior.stages]))
    lam = [struct.pack("<I", len(model.log_lambdas))]
    for name in model.class_ids:
        raw = name.encode("utf-8")
        lam.append(struct.pack("<I", len(raw)) + raw + struct.pack("<d", model.log_lambdas[name]))
    meta = json.dumps(model.metadata, sort_keys=True, default=str).encode("utf-8")
    body = (MAGIC + struct.pack("<I", VERSION) + _section(header) + _section(coeffs)
            + _section(weights) + _section(b"".join(lam)) + _section(meta))
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf, pos):
        self.buf = buf
        self.pos = pos

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise HeaderInconsistencyError("section runs past the end of the payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def section(self):
        (n,) = struct.unpack("<Q", self.take(8))
        return self.take(n)


def from_bytes(data):
    data = bytes(data)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    if len(data) < len(MAGIC) + 4:
        raise ChecksumError("file truncated before the version field")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise UnsupportedVersionError(version, VERSION)
    if len(data) < len(MAGIC) + 4 + _DIGEST:
        raise ChecksumError("file truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    rd = _Reader(body, len(MAGIC) + 4)
    header = rd.section()
    if len(header) != _HEADER.size:
        raise HeaderInconsistencyError(f"header is {len(header)} bytes, expected {_HEADER.size}")
    K, N, f, M, extent, bandwidth, peak = _HEADER.unpack(header)
    if K < 1 or N < 1 or f < 1 or f % 2 != 1 or M < 2 or N > f * f - 1:
        raise HeaderInconsistencyError(f"invalid architecture K={K} N={N} f={f} M={M}")
    if not (extent > 0 and bandwidth > 0 and peak > 0):
        raise HeaderInconsistencyError("extent, bandwidth and peak must be positive")
    coeffs = rd.section()
    weights = rd.section()
    nb = f * f - 1
    if len(coeffs) != 8 * K * N * nb or len(weights) != 8 * K * N * M:
        raise HeaderInconsistencyError("parameter section sizes disagree with the header")
    coeffs = np.frombuffer(coeffs, dtype="<f8").astype(np.float64).reshape(K, N, nb)
    weights = np.frombuffer(weights, dtype="<f8").astype(np.float64).reshape(K, N, M)
    lam = _Reader(rd.section(), 0)
    (count,) = struct.unpack("<I", lam.take(4))
    logs = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", lam.take(4))
        name = lam.take(n).decode("utf-8")
        (value,) = struct.unpack("<d", lam.take(8))
        logs[name] = value
    if lam.pos != len(lam.buf):
        raise HeaderInconsistencyError("trailing bytes in lambda table")
    try:
        meta = json.loads(rd.section().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderInconsistencyError(f"metadata is not valid JSON: {exc}") from None
    if rd.pos != len(body):
        raise HeaderInconsistencyError("trailing bytes after metadata")
    grid = RbfGrid(M, extent, bandwidth)
    try:
        stages = tuple(DiffusionStage(coeffs[k], weights[k], f, grid) for k in range(K))
        return ModelParams(PriorProx(stages), logs, peak, meta)
    except ValueError as exc:
        raise HeaderInconsistencyError(str(exc)) from None


def save(model, path):
    """Write atomically: the file at ``path`` is either the old or the complete new model."""
    path = Path(path)
    data = to_bytes(model)
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write model to {path}: {exc}") from exc


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model from {path}: {exc}") from exc
    try:
        return from_bytes(data)
    except ModelFormatError as exc:
        exc.args = (f"{path}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise


def export_text(model):
    """JSON mirror of the binary file; floats are written as ``float.hex`` so the round trip is exact."""
    prior = model.prior
    grid = prior.grid
    doc = {
        "magic": MAGIC.decode("ascii"),
        "version": VERSION,
        "header": {
            "K": prior.n_stages, "N": prior.n_filters, "f": prior.size, "M": grid.count,
            "extent": grid.extent.hex(), "bandwidth": grid.bandwidth.hex(), "peak": float(model.peak).hex(),
        },
        "coeffs": [[[float(v).hex() for v in row] for row in s.coeffs] for s in prior.stages],
        "weights": [[[float(v).hex() for v in row] for row in s.weights] for s in prior.stages],
        "lambdas": {k: model.log_lambdas[k].hex() for k in model.class_ids},
        "metadata": model.metadata,
    }
    return json.dumps(doc, indent=1, sort_keys=True, default=str)


def import_text(text):
    doc = json.loads(text)
    if doc.get("magic") != MAGIC.decode("ascii"):
        raise BadMagicError("not a model export (bad magic)")
    if doc.get("version") != VERSION:
        raise UnsupportedVersionError(doc.get("version"), VERSION)
    h = doc["header"]
    grid = RbfGrid(h["M"], float.fromhex(h["extent"]), float.fromhex(h["bandwidth"]))
    stages = []
    for c, w in zip(doc["coeffs"], doc["weights"]):
        coeffs = np.array([[float.fromhex(v) for v in row] for row in c])
        weights = np.array([[float.fromhex(v) for v in row] for row in w])
        stages.append(DiffusionStage(coeffs, weights, h["f"], grid))
    if len(stages) != h["K"]:
        raise HeaderInconsistencyError("stage count disagrees with header")
    logs = {k: float.fromhex(v) for k, v in doc["lambdas"].items()}
    return ModelParams(PriorProx(tuple(stages)), logs, float.fromhex(h["peak"]), doc.get("metadata", {}))
