import numpy as np
import pytest

from density_lab import gaussian_kernel, kde_density
from gradient_sde import (
    PotentialSpec, bounds_check, change_of_measure_check, collapse_check, drift_reference,
    empirical_density_gu, euler_batch, euler_maruyama, euler_strong_convergence,
    girsanov_record, girsanov_refinement, gradient_check, lipschitz_probe, normalisation_check,
    phi1_density, potential_from_name, theta_slab,
)
from lab_errors import ConfigError, InsufficientLocalSamples
from lab_stats import paired_difference
from path_engine import RngSpec, TimeGrid, quadrature, sample_ensemble
from sample_pass import potential_cols


@pytest.fixture(scope='module')
def fine_ensemble():
    return sample_ensemble(2, TimeGrid(256), 64, RngSpec(31), batch_size=64)


def test_potential_names():
    assert potential_from_name('zero', 3).is_zero
    cos = potential_from_name('cos', 3)
    assert cos.V(np.zeros((1, 3)))[0] == pytest.approx(1.5)
    bump = potential_from_name('bump:2', 2)
    assert bump.V(np.zeros((1, 2)))[0] == pytest.approx(2.0)
    for bad in ('well:1', 'cos:abc'):
        with pytest.raises(ConfigError):
            potential_from_name(bad, 2)


def test_potential_needs_every_bound():
    zero = potential_from_name('zero', 1)
    with pytest.raises(ConfigError):
        PotentialSpec('partial', zero.V, zero.grad, zero.laplacian, {'V': 0.0})


@pytest.mark.parametrize('name', ['cos:0.5', 'bump:0.5'])
def test_gradients_match_finite_differences(name):
    grad_err, lap_err = gradient_check(potential_from_name(name, 3), 3)
    assert grad_err <= 1e-6
    assert lap_err <= 1e-3


def test_zero_potential_keeps_the_driving_path(fine_ensemble):
    pb = fine_ensemble.batch(0)
    zero = potential_from_name('zero', 2)
    u = euler_batch(zero, pb.values, pb.increments, pb.grid)
    np.testing.assert_array_equal(u, pb.values)
    assert u is not pb.values
    assert np.abs(drift_reference(zero, pb.values, pb.increments, pb.grid)).max() == 0.0


def test_euler_steps_with_the_increments(fine_ensemble):
    pb = fine_ensemble.batch(0)
    V = potential_from_name('cos:0.5', 2)
    u = euler_batch(V, pb.values, pb.increments, pb.grid)
    np.testing.assert_array_equal(u[:, 0], pb.values[:, 0])
    for k in (0, 1, 100, pb.grid.steps - 1):
        step = u[:, k] - V.grad(u[:, k]) * pb.grid.dt + pb.increments[:, k]
        np.testing.assert_array_equal(u[:, k + 1], step)
    assert np.abs(u - pb.values).max() > 0.0


def test_euler_strong_order(fine_ensemble):
    table, order = euler_strong_convergence(potential_from_name('cos:0.5', 2), fine_ensemble, 32)
    assert list(table['steps']) == [32, 64, 128]
    assert (np.diff(table['mean_sup_error']) < 0).all()
    assert order > 0.5


def test_girsanov_forms_converge(fine_ensemble):
    table, order = girsanov_refinement(potential_from_name('cos:0.5', 2), fine_ensemble, 32)
    assert list(table['steps']) == [64, 128, 256]
    assert order > 0.0


def test_single_path_girsanov_record():
    ens = sample_ensemble(2, TimeGrid(2048), 1, RngSpec(41))
    path = ens.path(0)
    V = potential_from_name('cos:0.25', 2)
    rec = girsanov_record(V, path)
    assert rec.rho1_stochastic == pytest.approx(rec.rho1_representation, rel=0.05)
    assert rec.inv_rho1_of_B > 0
    u = euler_maruyama(V, path)
    assert u.values.shape == path.values.shape
    assert rec.g_of_u == pytest.approx(0.5 * quadrature((u.values ** 2).sum(axis=-1)))


def test_lipschitz_probe(fine_ensemble):
    probe = lipschitz_probe(potential_from_name('cos:0.5', 2), fine_ensemble, 16)
    assert probe['passed']
    assert probe['max_change'] <= probe['bound']


def test_collapse_for_zero_potential(samples):
    checks = collapse_check(samples, 'zero')
    assert all(checks.values())
    levels = np.linspace(0.3, 1.5, 8)
    phi = phi1_density(samples, 'zero', levels, 0.1)
    np.testing.assert_array_equal(phi.estimate, kde_density(samples, levels, 0.1).estimate)


def test_rho_bounds_hold(samples):
    inside = bounds_check(samples, potential_from_name('cos:0.25', 3))
    assert inside['repr_inside'] == 1.0
    assert inside['inv_inside'] == 1.0


def test_normalisation(samples):
    for row in normalisation_check(samples, 'cos:0.25').to_dict('records'):
        assert abs(row['mean'] - 1.0) <= 4.0 * row['stderr']


def test_change_of_measure(samples):
    table = change_of_measure_check(samples, 'cos:0.25', [0.5, 0.8], [1.0])
    assert len(table) == 4
    assert (table['diff'].abs() <= 4.0 * table['stderr']).all()


def test_phi1_routes(samples):
    levels = np.linspace(0.4, 1.2, 5)
    phi = phi1_density(samples, 'cos:0.25', levels, 0.1)
    emp = empirical_density_gu(samples, 'cos:0.25', levels, 0.1)
    assert phi.method == 'conditional-product'
    assert emp.method == 'empirical-sde'
    assert np.all(np.abs(phi.estimate - emp.estimate) <= 4.0 * np.hypot(phi.stderr, emp.stderr))
    cols = potential_cols('cos:0.25')
    g, gu = samples['g'].to_numpy(), samples[cols['gu']].to_numpy()
    inv_rho = np.exp(samples[cols['log_inv_rho_B']].to_numpy())
    for r in levels:
        diff, se = paired_difference(gaussian_kernel(r, g, 0.1) * inv_rho,
                                     gaussian_kernel(r, gu, 0.1), samples['batch'])
        assert abs(diff) <= 4.0 * se


def test_phi1_flags_thin_levels(samples):
    far = np.array([0.5, 40.0])
    phi = phi1_density(samples, 'cos:0.25', far, 0.05)
    assert phi.flags == ['', 'insufficient-local-samples']
    with pytest.raises(InsufficientLocalSamples):
        phi1_density(samples, 'cos:0.25', far, 0.05, strict=True)


def test_theta_slab_uses_g_of_u(samples):
    est = theta_slab(samples, 'cos:0.25', None, 0.7, [0.4, 0.2, 0.1], 0.1)
    gu = samples[potential_cols('cos:0.25')['gu']].to_numpy()
    expected = np.mean((gu > 0.7) & (gu <= 1.1)) / 0.4
    assert est.ladder.estimates[0] == pytest.approx(expected)
