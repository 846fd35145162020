import numpy as np
import pandas as pd
import pytest

from density_lab import (
    DensityCurve, central_levels, compare_routes, conditional_expectation, default_r_grid,
    empirical_cdf, gamma_tail, integrate_curve, inv_gamma_moments, invert_laplace,
    kde_bias_allowance, kde_density, laplace_mc, laplace_oracle, laplace_oracle_check,
    malliavin_cdf, malliavin_density, malliavin_density_X, silverman_bandwidth,
    stehfest_coefficients, tail_mass,
)
from lab_errors import InsufficientLocalSamples
from lab_stats import paired_difference


def synthetic_table(g, batches=10):
    frame = pd.DataFrame({'g': g, 'batch': np.arange(len(g)) % batches})
    frame.attrs.update({'n': 1, 'N': None, 'M': len(g), 'seed': 0})
    return frame


def test_density_curve_validation():
    with pytest.raises(ValueError):
        DensityCurve([0.2, 0.1], [1.0, 1.0], [0.0, 0.0], 'kde')
    with pytest.raises(ValueError):
        DensityCurve([0.1, 0.2], [1.0, np.nan], [0.0, 0.0], 'kde')
    with pytest.raises(ValueError):
        DensityCurve([0.1, 0.2], [1.0, 1.0], [0.0, -1.0], 'kde')
    curve = DensityCurve([0.1, 0.2, 0.3], [1.0, 2.0, 3.0], [0.1, 0.1, 0.1], 'kde')
    assert curve.at(0.21) == (2.0, 0.1)
    assert list(curve.to_frame().columns) == ['method', 'n', 'N', 'M', 'seed', 'r', 'estimate',
                                              'stderr', 'flags']


def test_kde_of_exponential_samples():
    g = np.random.default_rng(0).exponential(size=20000)
    table = synthetic_table(g)
    r = np.linspace(-1.0, 12.0, 2000)
    curve = kde_density(table, r)
    assert integrate_curve(curve) + tail_mass(table, r) == pytest.approx(1.0, abs=0.01)
    i = int(np.argmin(np.abs(r - 1.0)))
    bias = kde_bias_allowance(curve, silverman_bandwidth(g))[i]
    assert curve.estimate[i] == pytest.approx(np.exp(-r[i]), abs=4.0 * curve.stderr[i] + bias)


def test_unit_weights_are_bit_identical():
    g = np.random.default_rng(1).exponential(size=500)
    table = synthetic_table(g)
    r = np.linspace(0.2, 2.0, 7)
    plain = kde_density(table, r, 0.2)
    weighted = kde_density(table, r, 0.2, weights=np.ones_like(g))
    np.testing.assert_array_equal(plain.estimate, weighted.estimate)


def test_bandwidth_and_grid_helpers():
    with pytest.raises(ValueError):
        silverman_bandwidth([1.0])
    assert silverman_bandwidth(np.random.default_rng(2).normal(size=1000)) > 0
    levels = np.linspace(0.1, 1.0, 32)
    central = central_levels(levels)
    assert len(central) == 5
    assert central.min() > levels[0] and central.max() < levels[-1]


def test_conditional_expectation_needs_local_samples():
    rng = np.random.default_rng(3)
    g = rng.uniform(0.0, 1.0, size=5000)
    table = synthetic_table(g)
    table['X:lin'] = 2.0 * g
    est = conditional_expectation(table, 'lin', 0.5, bandwidth=0.05)
    assert est.value == pytest.approx(1.0, abs=4.0 * est.stderr)
    with pytest.raises(InsufficientLocalSamples):
        conditional_expectation(table, 'lin', 50.0, bandwidth=0.05)


def test_laplace_oracle_values():
    assert laplace_oracle(0.0, 3) == pytest.approx(1.0)
    assert laplace_oracle(1.0, 2) == pytest.approx(1.0 / np.cosh(1.0))
    assert laplace_oracle(400.0, 4) == pytest.approx(np.cosh(20.0) ** -2, rel=1e-9)


def test_stehfest_coefficients():
    coeff = stehfest_coefficients(12)
    assert len(coeff) == 12
    # inverting 1/s must give exactly 1
    assert (coeff / np.arange(1, 13)).sum() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        stehfest_coefficients(7)


def test_inverted_density_integrates_to_one():
    curve = invert_laplace(3, np.linspace(1e-3, 35.0, 4000))
    assert integrate_curve(curve) == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError):
        invert_laplace(3, [0.0, 1.0])


def test_laplace_check_on_brownian_samples(samples):
    table = laplace_oracle_check(samples, [0.5, 1.0, 2.0], 3)
    for row in table.to_dict('records'):
        assert abs(row['mc'] - row['oracle']) <= 5.0 * row['stderr'] + 2e-3
    mc, se = laplace_mc(samples, 0.0)
    assert (mc, se) == (1.0, 0.0)


def test_kde_and_malliavin_routes_agree(samples):
    levels = default_r_grid(samples['g'], points=32)
    h = silverman_bandwidth(samples['g'])
    central = central_levels(levels)
    idx = [int(np.argmin(np.abs(levels - r))) for r in central]
    allowance = kde_bias_allowance(kde_density(samples, levels, h), h)[idx]
    table = compare_routes(samples, central, 'kde', 'malliavin', h, allowance=allowance)
    for row, bias in zip(table.to_dict('records'), allowance):
        assert abs(row['diff']) <= 3.0 * row['stderr'] + bias
    assert table['passed'].all()


def test_f_x_of_constant_is_malliavin_density(samples):
    levels = default_r_grid(samples['g'], points=12)
    one = malliavin_density_X(samples, 'one', levels)
    np.testing.assert_array_equal(one.estimate, malliavin_density(samples, levels).estimate)


def test_cdf_routes(samples):
    levels = default_r_grid(samples['g'], points=12)
    emp = empirical_cdf(samples, levels)
    mal = malliavin_cdf(samples, levels)
    assert np.all(np.diff(emp.estimate) >= 0)
    assert np.all(np.abs(emp.estimate - mal.estimate) <= 4.0 * np.hypot(emp.stderr, mal.stderr))
    g = samples['g'].to_numpy()
    w = np.where(samples['degenerate'], 0.0, samples['delta_u_over_gamma'])
    for r in central_levels(levels):
        diff, se = paired_difference((g > r).astype(float), w * np.maximum(g - r, 0.0),
                                     samples['batch'])
        assert abs(diff) <= 4.0 * se


def test_inverse_gamma_moments(samples):
    assert inv_gamma_moments(samples, 0.0).estimate == 1.0
    rep = inv_gamma_moments(samples, 1.0)
    assert rep.estimate > 1.0
    assert 0.0 < rep.extras['top1_share'] < 1.0
    with pytest.raises(ValueError):
        inv_gamma_moments(samples, -1.0)


def test_gamma_tail_table(samples):
    rep = gamma_tail(samples, [0.2, 0.15, 0.1])
    assert list(rep.tail['eta']) == [0.2, 0.15, 0.1]
    assert (rep.tail['prob'] <= rep.tail['chi2_bound'] + 5.0 * rep.tail['stderr']).all()
    z = rep.extras
    assert z['z1_variance'] == pytest.approx(2.0 / 15.0, abs=4.0 * z['z1_variance_se'])
    with pytest.raises(ValueError):
        gamma_tail(samples, [0.1, 0.2])
