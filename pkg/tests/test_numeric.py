import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uncertain_retrieval.numeric import (
    EPSILON_FLOOR,
    NonFiniteError,
    compute_stats,
    cosine_matrix,
    cosine_sim,
    log_softmax_row,
    whiten,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_stats_of_column_matches_arithmetic():
    col = [2.0, 4.0, 6.0]
    mean = sum(col) / len(col)
    pop_std = math.sqrt(sum((x - mean) ** 2 for x in col) / len(col))
    stats = compute_stats(np.array(col)[:, None])
    assert stats.mu[0] == pytest.approx(4.0, abs=1e-15)
    assert stats.sigma[0] == pytest.approx(pop_std, rel=1e-15)
    assert pop_std == pytest.approx(math.sqrt(8 / 3))
    assert stats.sigma[0] == pytest.approx(1.63299, abs=1e-5)


def test_constant_column_hits_floor():
    stats = compute_stats(np.full((4, 1), 5.0))
    assert stats.mu[0] == 5.0
    assert stats.sigma[0] == EPSILON_FLOOR


def test_two_column_batch():
    stats = compute_stats(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    np.testing.assert_array_equal(stats.mu, [0.0, 0.0])
    np.testing.assert_array_equal(stats.sigma, [1.0, EPSILON_FLOOR])
    assert stats.sigma_scalar == pytest.approx((1.0 + EPSILON_FLOOR) / 2)


@pytest.mark.parametrize(
    "batch, message",
    [
        (np.ones((1, 3)), "degenerate batch"),
        (np.array([[1.0, np.nan], [0.0, 1.0]]), "non-finite feature"),
        (np.array([[1.0, np.inf], [0.0, 1.0]]), "non-finite feature"),
    ],
)
def test_stats_errors(batch, message):
    with pytest.raises(ValueError, match=message):
        compute_stats(batch)


def test_nonfinite_is_a_value_error():
    assert issubclass(NonFiniteError, ValueError)


def test_whiten_column():
    col = np.array([[2.0], [4.0], [6.0]])
    out = whiten(col, compute_stats(col))
    expected = [(x - 4.0) / math.sqrt(8 / 3) for x in (2.0, 4.0, 6.0)]
    np.testing.assert_allclose(out[:, 0], expected, rtol=1e-15)
    np.testing.assert_allclose(out[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_whiten_rows_equal_to_mean_give_zeros():
    batch = np.tile([1.5, -2.0, 3.0], (4, 1))
    assert np.all(whiten(batch, compute_stats(batch)) == 0.0)


def test_whiten_dimension_mismatch():
    stats = compute_stats(np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        whiten(np.ones((5, 4)), stats)


def test_whiten_roundtrip_standardizes(rng):
    batch = rng.normal(3.0, 2.0, size=(50, 6))
    stats = compute_stats(whiten(batch, compute_stats(batch)))
    np.testing.assert_allclose(stats.mu, 0.0, atol=1e-10)
    np.testing.assert_allclose(stats.sigma, 1.0, atol=1e-10)


@given(arrays(np.float64, (6, 3), elements=st.floats(-100, 100)))
@settings(max_examples=60, deadline=None)
def test_rewhitening_is_idempotent(batch):
    if np.any(batch.std(axis=0) < 1e-3):
        return
    once = whiten(batch, compute_stats(batch))
    twice = whiten(once, compute_stats(once))
    assert np.max(np.abs(twice - once)) < 1e-10


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([1, 1], [1, 1], 1.0),
        ([1, 0], [0, 1], 0.0),
        ([1, 2, 3], [3, 2, 1], (1 * 3 + 2 * 2 + 3 * 1) / (1 + 4 + 9)),
    ],
)
def test_cosine_examples(a, b, expected):
    assert cosine_sim(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_example_value():
    assert cosine_sim([1, 2, 3], [3, 2, 1]) == pytest.approx(0.714286, abs=1e-6)


def test_cosine_zero_norm():
    with pytest.raises(ValueError, match="zero-norm embedding"):
        cosine_sim([0, 0], [1, 0])


@given(
    arrays(np.float64, 5, elements=finite),
    arrays(np.float64, 5, elements=finite),
    st.floats(1e-3, 1e3),
)
@settings(max_examples=100, deadline=None)
def test_cosine_symmetric_and_scale_invariant(a, b, c):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    k = cosine_sim(a, b)
    assert abs(k - cosine_sim(b, a)) <= 1e-12
    assert abs(k - cosine_sim(c * a, b)) <= 1e-12
    assert -1.0 <= k <= 1.0


def test_cosine_matrix_agrees_with_pairwise(rng):
    q, g = rng.normal(size=(4, 6)), rng.normal(size=(7, 6))
    m = cosine_matrix(q, g)
    for i in range(4):
        for j in range(7):
            assert m[i, j] == pytest.approx(cosine_sim(q[i], g[j]), abs=1e-14)


def test_log_softmax_examples():
    np.testing.assert_allclose(log_softmax_row([0.0, 0.0]), [-math.log(2)] * 2, rtol=1e-15)
    big = log_softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(0.0, abs=1e-300)
    assert big[1] == pytest.approx(-1000.0, rel=1e-15)
    lse = math.log(math.e + 1.0)
    np.testing.assert_allclose(log_softmax_row([1.0, 0.0]), [1.0 - lse, -lse], rtol=1e-15)
    np.testing.assert_allclose(log_softmax_row([1.0, 0.0]), [-0.31326, -1.31326], atol=1e-5)


def test_log_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        log_softmax_row([np.nan, 0.0])


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
@settings(max_examples=100, deadline=None)
def test_softmax_sums_to_one(scores):
    assert abs(np.exp(log_softmax_row(scores)).sum() - 1.0) <= 1e-12
