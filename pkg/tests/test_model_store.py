import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hqsrestore import model_store
from hqsrestore.errors import (
    BadMagicError, ChecksumError, HeaderInconsistencyError, ModelFormatError, UnsupportedVersionError,
)
from hqsrestore.params import ModelParams
from hqsrestore.prior import prior_prox_forward, random_prior
from hqsrestore.rbf import RbfGrid


def random_model(rng, n_classes=None):
    K, N, f, M = rng.integers(1, 4), rng.integers(1, 5), rng.choice([3, 5]), rng.integers(2, 9)
    grid = RbfGrid(int(M), float(rng.uniform(10, 400)), float(rng.uniform(1, 50)))
    prior = random_prior(rng, int(K), int(N), int(f), grid, weight_scale=float(rng.uniform(0.1, 100)))
    n_classes = rng.integers(0, 5) if n_classes is None else n_classes
    logs = {f"class-{rng.integers(1e6)}/{i}": float(rng.normal(scale=3)) for i in range(n_classes)}
    return ModelParams(prior, logs, float(rng.choice([1.0, 255.0, 65535.0])), {"seed": int(rng.integers(1e9))})


def rechecksum(body):
    return body + hashlib.sha256(body).digest()


def test_file_roundtrip_is_bit_exact(tmp_path):
    m = random_model(np.random.default_rng(0), 3)
    path = tmp_path / "m.bin"
    model_store.save(m, path)
    back = model_store.load(path)
    assert back.to_vector().tobytes() == m.to_vector().tobytes()
    assert back.log_lambdas == m.log_lambdas and back.metadata == m.metadata and back.peak == m.peak
    assert back.prior.grid == m.prior.grid


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bytes_roundtrip_property(seed):
    m = random_model(np.random.default_rng(seed))
    data = model_store.to_bytes(m)
    back = model_store.from_bytes(data)
    assert back.equals(m)
    assert model_store.to_bytes(back) == data


def test_lambda_table_is_order_independent():
    rng = np.random.default_rng(1)
    prior = random_prior(rng, 1, 1, 3, RbfGrid(3, 10.0))
    a = ModelParams(prior, {"b": 1.0, "a": 2.0})
    b = ModelParams(prior, {"a": 2.0, "b": 1.0})
    assert model_store.to_bytes(a) == model_store.to_bytes(b)


def test_empty_lambda_table(tmp_path):
    m = random_model(np.random.default_rng(2), 0)
    model_store.save(m, tmp_path / "e.bin")
    assert model_store.load(tmp_path / "e.bin").log_lambdas == {}


def test_text_export_roundtrip():
    m = random_model(np.random.default_rng(3), 2)
    text = model_store.export_text(m)
    doc = json.loads(text)
    assert {"magic", "version", "header", "coeffs", "weights", "lambdas", "metadata"} <= set(doc)
    back = model_store.import_text(text)
    assert back.equals(m)
    assert model_store.to_bytes(back) == model_store.to_bytes(m)


def test_hand_built_minimal_file_loads_and_runs():
    # K=1, N=1, f=3, M=2 assembled field by field
    header = struct.pack("<4I3d", 1, 1, 3, 2, 5.0, 5.0, 255.0)
    coeffs = np.arange(8, dtype="<f8") / 10
    weights = np.array([0.5, -0.5], dtype="<f8")
    name = b"denoise/15"
    lam = struct.pack("<I", 1) + struct.pack("<I", len(name)) + name + struct.pack("<d", -1.0)
    meta = b"{}"
    sec = lambda p: struct.pack("<Q", len(p)) + p
    body = b"HQSPRIOR" + struct.pack("<I", 1) + sec(header) + sec(coeffs.tobytes()) + sec(weights.tobytes()) + sec(lam) + sec(meta)
    m = model_store.from_bytes(rechecksum(body))
    assert m.prior.n_stages == 1 and m.prior.n_filters == 1 and m.prior.size == 3 and m.prior.grid.count == 2
    assert m.log_lambdas == {"denoise/15": -1.0}
    z, _ = prior_prox_forward(np.random.default_rng(4).uniform(0, 255, (6, 6)), m.prior)
    assert np.all(np.isfinite(z))


def test_future_version_names_both_versions():
    data = bytearray(model_store.to_bytes(random_model(np.random.default_rng(5))))
    data[8:12] = struct.pack("<I", 7)
    with pytest.raises(UnsupportedVersionError) as err:
        model_store.from_bytes(bytes(data))
    assert "7" in str(err.value) and "1" in str(err.value)
    assert err.value.found == 7 and err.value.supported == 1


def test_bad_magic():
    with pytest.raises(BadMagicError):
        model_store.from_bytes(b"NOTAMODEL" + bytes(64))
    with pytest.raises(BadMagicError):
        model_store.from_bytes(b"")


def test_truncation_is_a_checksum_error(tmp_path):
    data = model_store.to_bytes(random_model(np.random.default_rng(6), 2))
    for cut in (13, len(data) // 2, len(data) - 1):
        with pytest.raises(ChecksumError):
            model_store.from_bytes(data[:cut])
    (tmp_path / "t.bin").write_bytes(data[:-5])
    with pytest.raises(ChecksumError, match="t.bin"):
        model_store.load(tmp_path / "t.bin")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_any_byte_flip_is_rejected_with_a_typed_error(seed, data):
    blob = bytearray(model_store.to_bytes(random_model(np.random.default_rng(seed))))
    pos = data.draw(st.integers(0, len(blob) - 1))
    blob[pos] ^= data.draw(st.integers(1, 255))
    with pytest.raises(ModelFormatError):
        model_store.from_bytes(bytes(blob))


def test_payload_flip_is_a_checksum_error():
    blob = bytearray(model_store.to_bytes(random_model(np.random.default_rng(7))))
    blob[40] ^= 0x10
    with pytest.raises(ChecksumError):
        model_store.from_bytes(bytes(blob))


def test_inconsistent_header_with_valid_checksum():
    m = random_model(np.random.default_rng(8), 1)
    data = model_store.to_bytes(m)
    body = bytearray(data[:-32])
    # header starts after magic, version and the u64 length; bump K by one
    (K,) = struct.unpack_from("<I", body, 20)
    struct.pack_into("<I", body, 20, K + 1)
    with pytest.raises(HeaderInconsistencyError):
        model_store.from_bytes(rechecksum(bytes(body)))
    body = bytearray(data[:-32])
    struct.pack_into("<I", body, 28, 4)  # even filter size
    with pytest.raises(HeaderInconsistencyError):
        model_store.from_bytes(rechecksum(bytes(body)))


def test_save_is_atomic_and_reports_the_path(tmp_path):
    m = random_model(np.random.default_rng(9))
    path = tmp_path / "m.bin"
    model_store.save(m, path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.bin"]
    with pytest.raises(OSError, match="missing"):
        model_store.save(m, tmp_path / "missing" / "m.bin")
    with pytest.raises(OSError, match="nothing"):
        model_store.load(tmp_path / "nothing.bin")
