import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmcc.errors import AllZeroMatrix, BatchTooSmall, DimMismatch, ValidationError, ZeroNormVector
from fedmcc.losses import (
    FourViewBatch,
    cc_loss,
    cluster_loss_k,
    contrastive_loss,
    entropy,
    instance_loss_k,
    mcc_loss,
)


def brute_contrastive(u, v, tau):
    """Literal double loop over columns with plain exp/log and no stabilization."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    n = u.shape[1]

    def s(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    total = 0.0
    for i in range(n):
        xi = 0.0
        for j in range(n):
            if j != i:
                xi += math.exp(s(u[:, i], u[:, j]) / tau) + math.exp(s(u[:, i], v[:, j]) / tau)
        total += -math.log(math.exp(s(u[:, i], v[:, i]) / tau) / xi)
    return total / n


def brute_entropy(c):
    c = np.asarray(c, float)
    mass = [sum(abs(c[i, j]) for i in range(c.shape[0])) for j in range(c.shape[1])]
    total = sum(mass)
    return -sum(m / total * math.log(m / total) for m in mass if m > 0)


def random_views(rng, n=5, d1=6, d2=3):
    z = [rng.normal(size=(d1, n)) for _ in range(4)]
    c = [rng.uniform(0.05, 1.0, size=(n, d2)) for _ in range(4)]
    return FourViewBatch(*z, *c)


def test_contrastive_orthonormal_example():
    e = np.eye(2)
    assert contrastive_loss(e, e, 1.0) == pytest.approx(math.log(2) - 1, abs=1e-12)
    assert contrastive_loss(e, e, 1.0) == pytest.approx(-0.306853, abs=1e-6)


def test_contrastive_matches_brute_force(rng):
    for _ in range(50):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.2, 2.0))
        u = rng.normal(size=(d, n))
        v = rng.normal(size=(d, n))
        assert contrastive_loss(u, v, tau) == pytest.approx(brute_contrastive(u, v, tau), rel=1e-12, abs=1e-12)


def test_contrastive_stable_at_small_tau(rng):
    u = rng.normal(size=(4, 6))
    val = contrastive_loss(u, u, 1e-3)
    assert np.isfinite(val)


def test_contrastive_errors():
    with pytest.raises(BatchTooSmall):
        contrastive_loss(np.ones((3, 1)), np.ones((3, 1)), 1.0)
    with pytest.raises(DimMismatch):
        contrastive_loss(np.ones((3, 2)), np.ones((2, 2)), 1.0)
    with pytest.raises(ValidationError):
        contrastive_loss(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(ZeroNormVector):
        contrastive_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2), 1.0)


@pytest.mark.parametrize("c, expected", [
    (np.ones((4, 4)), math.log(4)),
    (np.array([[1.0, 0.0], [1.0, 0.0]]), 0.0),
    (np.array([[1.0, 1.0, 2.0]]), 1.0397207708399179),
])
def test_entropy_examples(c, expected):
    assert entropy(c) == pytest.approx(expected, abs=1e-12)


def test_entropy_hand_value_for_masses_1_1_2():
    p = [0.25, 0.25, 0.5]
    assert entropy([[1.0, 1.0, 2.0]]) == pytest.approx(-sum(x * math.log(x) for x in p), abs=1e-15)


def test_entropy_all_zero_raises():
    with pytest.raises(AllZeroMatrix):
        entropy(np.zeros((3, 2)))


def test_entropy_brute_force_and_bounds(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        d = int(rng.integers(1, 8))
        c = rng.normal(size=(n, d)) * (rng.random(size=(n, d)) > 0.2)
        if not c.any():
            continue
        h = entropy(c)
        assert -1e-15 <= h <= math.log(d) + 1e-12
        assert h == pytest.approx(brute_entropy(c), abs=1e-12)


def test_cc_loss_composition(rng):
    za, zb = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    ca, cb = rng.uniform(0.1, 1, size=(5, 3)), rng.uniform(0.1, 1, size=(5, 3))
    expect = 0.5 * (brute_contrastive(za, zb, 0.5) + brute_contrastive(ca, cb, 1.0)) + (
        brute_entropy(ca) + brute_entropy(cb))
    assert cc_loss(za, zb, ca, cb, 0.5, 1.0) == pytest.approx(expect, rel=1e-12)
    neg = 0.5 * (brute_contrastive(za, zb, 0.5) + brute_contrastive(ca, cb, 1.0)) - (
        brute_entropy(ca) + brute_entropy(cb))
    assert cc_loss(za, zb, ca, cb, 0.5, 1.0, entropy_weight=-1.0) == pytest.approx(neg, rel=1e-12)


def test_mcc_trivial_identical_views():
    e = np.eye(2)
    c = np.eye(2)
    views = FourViewBatch(e, e, e, e, c, c, c, c)
    # cluster columns are orthonormal too, so every contrastive term is log2 - 1
    # and each entropy over equal column masses is log 2
    expected = 0.5 * 4 * (math.log(2) - 1) + 4 * math.log(2)
    assert mcc_loss(views, 1.0, 1.0) == pytest.approx(expected, abs=1e-12)
    assert mcc_loss(views, 1.0, 1.0, entropy_weight=0.0) == pytest.approx(2 * (math.log(2) - 1), abs=1e-12)


def test_mcc_reduces_to_cc_when_target_equals_online(rng):
    za, zb = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    ca, cb = rng.uniform(0.1, 1, size=(5, 3)), rng.uniform(0.1, 1, size=(5, 3))
    views = FourViewBatch.from_two_views(za, zb, ca, cb)
    cc = cc_loss(za, zb, ca, cb, 0.5, 1.0, entropy_weight=0.0)
    assert mcc_loss(views, 0.5, 1.0, entropy_weight=0.0) == pytest.approx(2 * cc, rel=1e-12)


@pytest.mark.parametrize("w", [1.0, -1.0, 0.0])
def test_split_identity(rng, w):
    for _ in range(50):
        v = random_views(rng, n=int(rng.integers(2, 8)))
        total = instance_loss_k(v.z_aO, v.z_bT, v.z_aT, v.z_bO, 0.5) + cluster_loss_k(
            v.c_aO, v.c_bT, v.c_aT, v.c_bO, 1.0, w)
        assert abs(total - mcc_loss(v, 0.5, 1.0, w)) <= 1e-12


def test_four_view_shape_validation():
    z = np.ones((3, 2))
    c = np.ones((2, 2))
    with pytest.raises(DimMismatch):
        FourViewBatch(z, z, z, np.ones((3, 3)), c, c, c, c)
    with pytest.raises(DimMismatch):
        FourViewBatch(z, z, z, z, *(np.ones((3, 2)),) * 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_mcc_scale_invariance(seed, factor):
    v = random_views(np.random.default_rng(seed))
    a = mcc_loss(v, 0.5, 1.0)
    b = mcc_loss(v.scaled(factor), 0.5, 1.0)
    assert abs(a - b) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contrastive_invariant_to_column_rescaling(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    s = rng.uniform(0.1, 10, size=5)
    assert contrastive_loss(u * s, v, 0.7) == pytest.approx(contrastive_loss(u, v, 0.7), rel=1e-10, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contrastive_column_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    p = rng.permutation(6)
    assert contrastive_loss(u[:, p], v[:, p], 0.5) == pytest.approx(contrastive_loss(u, v, 0.5), rel=1e-12)


def test_single_nonzero_column_cluster_matrix():
    # zero entropy, but the empty cluster column has no direction to contrast
    c = np.array([[0.3, 0.0], [0.7, 0.0]])
    assert entropy(c) == 0.0
    with pytest.raises(ZeroNormVector):
        cc_loss(np.eye(2), np.eye(2), c, c, 1.0, 1.0)
