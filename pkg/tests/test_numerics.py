import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphreg.errors import InvalidArgumentError
from graphreg.numerics import DTYPE, as_matrix, as_vector, make_rng, matvec, sample_without_replacement


def test_as_vector_promotes_to_float64():
    v = as_vector([1, 2, 3])
    assert v.dtype == DTYPE and v.shape == (3,)


def test_as_vector_rejects_matrix():
    with pytest.raises(InvalidArgumentError):
        as_vector([[1.0, 2.0]])


def test_as_matrix_rejects_vector():
    with pytest.raises(InvalidArgumentError):
        as_matrix([1.0, 2.0])


def test_matvec_matches_numpy():
    rng = np.random.default_rng(0)
    m, v = rng.normal(size=(4, 3)), rng.normal(size=3)
    np.testing.assert_allclose(matvec(m, v), m @ v, rtol=0, atol=1e-15)


def test_matvec_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        matvec(np.ones((2, 3)), np.ones(2))


def test_make_rng_is_reproducible_and_stream_separated():
    a = make_rng(3, 1, 5).random(8)
    b = make_rng(3, 1, 5).random(8)
    c = make_rng(3, 1, 6).random(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.data())
def test_sample_without_replacement_properties(n, data):
    k = data.draw(st.integers(0, n))
    out = sample_without_replacement(make_rng(0, n, k), n, k)
    assert out.size == k
    assert np.unique(out).size == k
    assert np.all(np.diff(out) > 0)
    assert k == 0 or (out.min() >= 0 and out.max() < n)


def test_sample_without_replacement_too_many():
    with pytest.raises(InvalidArgumentError):
        sample_without_replacement(make_rng(0), 3, 4)
