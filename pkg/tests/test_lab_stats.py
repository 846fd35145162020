import math
import statistics

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from scipy.stats import linregress

from lab_stats import (
    RunningStats, batched_stats, combined_se, fit_line, mean_and_se, merge_all,
    paired_difference, z_score,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=2, max_size=200))
def test_push_matches_statistics(values):
    rs = RunningStats()
    for v in values:
        rs.push(v)
    assert rs.size() == len(values)
    assert math.isclose(rs.mean, statistics.mean(values), rel_tol=1e-9, abs_tol=1e-6)
    assert math.isclose(rs.var(), statistics.variance(values), rel_tol=1e-6, abs_tol=1e-3)


@given(st.lists(finite, min_size=2, max_size=100), st.lists(finite, min_size=2, max_size=100))
def test_merge_matches_concatenation(a, b):
    merged = RunningStats.from_array(a).merge(RunningStats.from_array(b))
    whole = RunningStats.from_array(a + b)
    assert merged.count == whole.count
    assert math.isclose(merged.mean, whole.mean, rel_tol=1e-9, abs_tol=1e-6)
    assert math.isclose(merged.var(), whole.var(), rel_tol=1e-6, abs_tol=1e-3)


def test_merge_with_empty_is_identity():
    rs = RunningStats.from_array([1.0, 2.0, 4.0])
    assert rs.merge(RunningStats()) == rs
    assert RunningStats().merge(rs) == rs
    assert merge_all([]).count == 0


def test_elementwise_accumulators():
    data = np.arange(12.0).reshape(4, 3)
    rs = RunningStats.from_array(data)
    np.testing.assert_allclose(rs.mean, data.mean(axis=0))
    np.testing.assert_allclose(rs.var(), data.var(axis=0, ddof=1))


def test_batched_stats_equals_pooled():
    rng = np.random.default_rng(3)
    contrib = rng.normal(size=1000)
    batch = np.repeat(np.arange(10), 100)
    stats = batched_stats(contrib, batch)
    assert stats.count == 1000
    assert stats.mean == pytest.approx(contrib.mean(), rel=1e-12, abs=1e-14)
    assert stats.var() == pytest.approx(contrib.var(ddof=1), rel=1e-10)


def test_mean_and_se_of_constant():
    mean, se = mean_and_se(np.full(50, 2.5), np.zeros(50, dtype=int))
    assert mean == 2.5
    assert se == 0.0


def test_paired_difference_of_identical_contributions():
    x = np.random.default_rng(0).normal(size=300)
    diff, se = paired_difference(x, x, np.arange(300) // 100)
    assert diff == 0.0
    assert se == 0.0


def test_combined_and_z():
    assert combined_se(3.0, 4.0) == pytest.approx(5.0)
    assert z_score(1.5, 1.0, 0.25) == pytest.approx(2.0)
    assert z_score(1.0, 1.0, 0.0) == 0.0
    assert z_score(1.1, 1.0, 0.0) == float('inf')


def test_fit_line_recovers_exact_line():
    x = np.linspace(-1.0, 2.0, 7)
    a, b, se_a, se_b = fit_line(x, 0.5 - 3.0 * x)
    assert a == pytest.approx(0.5)
    assert b == pytest.approx(-3.0)
    assert se_b == pytest.approx(0.0, abs=1e-8)


def test_fit_line_matches_linregress():
    rng = np.random.default_rng(8)
    x = np.linspace(0.0, 3.0, 25)
    y = 1.0 + 0.7 * x + rng.normal(scale=0.2, size=x.size)
    a, b, se_a, se_b = fit_line(x, y)
    ref = linregress(x, y)
    assert a == pytest.approx(ref.intercept, rel=1e-10)
    assert b == pytest.approx(ref.slope, rel=1e-10)
    assert se_b == pytest.approx(ref.stderr, rel=1e-8)
    assert se_a == pytest.approx(ref.intercept_stderr, rel=1e-8)


def test_fit_line_weights_act_like_repeats():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.1, 0.9, 2.2, 2.8])
    counts = np.array([1, 3, 2, 1])
    a, b, _, _ = fit_line(x, y, weights=counts)
    a_rep, b_rep, _, _ = fit_line(np.repeat(x, counts), np.repeat(y, counts))
    assert (a, b) == pytest.approx((a_rep, b_rep), rel=1e-10)


def test_fit_line_through_two_points_has_no_error_bars():
    a, b, se_a, se_b = fit_line([1.0, 2.0], [3.0, 5.0])
    assert (a, b) == pytest.approx((1.0, 2.0))
    assert math.isnan(se_a) and math.isnan(se_b)
