import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hqsrestore.errors import ConfigurationError, InputError
from hqsrestore.params import ModelParams
from hqsrestore.prior import random_prior
from hqsrestore.rbf import RbfGrid

PRIOR = random_prior(np.random.default_rng(0), 2, 2, 3, RbfGrid(5, 310.0))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.floats(-20, 20), max_size=5))
def test_vector_roundtrip_and_positive_lambdas(logs):
    m = ModelParams(PRIOR, logs)
    back = m.with_vector(m.to_vector())
    assert back.equals(m)
    assert all(v > 0 for v in m.lambdas.values())
    assert m.class_ids == sorted(logs)


def test_create_stores_logs():
    m = ModelParams.create(PRIOR, {"a": 2.0})
    assert m.log_lambdas["a"] == math.log(2.0)
    assert m.lam("a") == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(InputError):
        ModelParams.create(PRIOR, {"a": 0.0})


def test_unknown_class_lists_known_ones():
    m = ModelParams.create(PRIOR, {"denoise/5": 1.0})
    with pytest.raises(ConfigurationError, match="denoise/5"):
        m.lam("deconv/3")


def test_immutable_helpers():
    m = ModelParams.create(PRIOR, {"a": 1.0}, metadata={"x": 1})
    m2 = m.with_metadata(y=2)
    assert m.metadata == {"x": 1} and m2.metadata == {"x": 1, "y": 2}
    assert m2.equals(m)
    with pytest.raises(InputError):
        m.with_vector(np.zeros(3))
    with pytest.raises(InputError):
        ModelParams(PRIOR, {"a": float("nan")})
