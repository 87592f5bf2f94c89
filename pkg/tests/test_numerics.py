import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedmcc.errors import DimMismatch, ZeroNormVector
from fedmcc.numerics import cosine_matrix, cosine_similarity, l1_norm


def test_cosine_examples():
    assert cosine_similarity([3, 4], [3, 4]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ZeroNormVector):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(DimMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


@pytest.mark.parametrize("u, expected", [((0, 0, 0), 0.0), ((1, -2, 3), 6.0), ((0.2, 0.3, 0.5), 1.0)])
def test_l1_norm(u, expected):
    assert l1_norm(u) == pytest.approx(expected, abs=1e-15)


def test_cosine_matrix_matches_pairwise(rng):
    u = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 3))
    s = cosine_matrix(u, v)
    for i in range(4):
        for j in range(3):
            assert s[i, j] == pytest.approx(cosine_similarity(u[:, i], v[:, j]), abs=1e-14)


def test_cosine_matrix_rejects_zero_column():
    with pytest.raises(ZeroNormVector):
        cosine_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec_pair = st.integers(1, 8).flatmap(
    lambda d: st.tuples(arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))
)


@settings(max_examples=200, deadline=None)
@given(vec_pair, st.floats(1e-3, 1e3))
def test_cosine_properties(pair, c):
    u, v = pair
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    s = cosine_similarity(u, v)
    assert -1.0 <= s <= 1.0
    assert s == cosine_similarity(v, u)
    assert math.isclose(cosine_similarity(c * u, v), s, rel_tol=1e-12, abs_tol=1e-12)
