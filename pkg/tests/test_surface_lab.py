import numpy as np
import pandas as pd
import pytest

from lab_errors import EmptySlab
from malliavin_core import direction_field, functional_from_spec
from path_engine import RngSpec, TimeGrid, sample_ensemble
from sample_pass import SampleSpec, run_pass
from surface_lab import (
    SlabLadder, concentration_probe, eps_ladder, extrapolation_weights, ibp_lhs, ibp_report,
    ibp_rhs, ibp_summary, slab_convergence, slab_integral, slab_ladder, surface_integral,
    theta_mollifier,
)


def synthetic_table(g, batches=10):
    frame = pd.DataFrame({'g': g, 'batch': np.arange(len(g)) % batches})
    frame.attrs.update({'n': 1, 'N': None, 'M': len(g), 'seed': 0})
    return frame


@pytest.fixture(scope='module')
def triangular():
    """g with density r/2 on [0, 2]."""
    u = np.random.default_rng(5).uniform(size=200000)
    return synthetic_table(2.0 * np.sqrt(u))


def test_eps_ladder_halves():
    np.testing.assert_allclose(eps_ladder(0.2, 3), [0.2, 0.1, 0.05])
    with pytest.raises(ValueError):
        SlabLadder(1.0, np.array([0.1, 0.2]), np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.0)


def test_extrapolation_weights_two_rungs():
    np.testing.assert_allclose(extrapolation_weights([0.2, 0.1]), [-1.0, 2.0])
    w = extrapolation_weights(eps_ladder(0.2, 4))
    assert w.sum() == pytest.approx(1.0)


def test_slab_integral_of_uniform():
    table = synthetic_table(np.random.default_rng(6).uniform(0.0, 2.0, size=20000))
    value, se, count = slab_integral(table, None, 1.0, 0.2)
    assert value == pytest.approx(0.5, abs=5.0 * se)
    assert count > 1000
    with pytest.raises(EmptySlab):
        slab_integral(table, None, 5.0, 0.1)
    with pytest.raises(ValueError):
        slab_integral(table, None, 1.0, 0.0)


def test_extrapolation_removes_linear_bias(triangular):
    ladder = slab_ladder(triangular, None, 1.0, eps_ladder(0.4, 4))
    # raw slab averages sit at f(r) + eps/4
    assert ladder.estimates[0] == pytest.approx(0.6, abs=5.0 * ladder.stderrs[0])
    assert ladder.extrapolated == pytest.approx(0.5, abs=5.0 * ladder.extrapolated_se)
    assert ladder.flags == []
    assert len(ladder.contrib) == len(triangular)


def test_slab_below_matches_above(triangular):
    below = slab_ladder(triangular, None, 1.0, eps_ladder(0.4, 4), side='below')
    assert below.estimates[0] == pytest.approx(0.4, abs=5.0 * below.stderrs[0])
    assert below.extrapolated == pytest.approx(0.5, abs=5.0 * below.extrapolated_se)


def test_sparse_ladder_falls_back(triangular):
    built = slab_ladder(triangular, None, 1.0, eps_ladder(0.4, 3), min_count=10 ** 9)
    assert built.flags == ['no-extrapolation']
    with pytest.raises(EmptySlab):
        slab_ladder(triangular, None, 10.0, eps_ladder(0.4, 3))


def test_surface_integral_routes(triangular):
    est = surface_integral(triangular, None, 1.0, eps_ladder(0.4, 4), bandwidth=0.05)
    slab, slab_se = est.routes['slab-extrapolation']
    cp, cp_se = est.routes['conditional-product']
    assert slab == est.value
    # the kernel is unbiased on a linear density
    assert cp == pytest.approx(0.5, abs=4.0 * cp_se)
    table, order = slab_convergence(est.ladder)
    assert len(table) == 3


def test_theta_mollifier():
    a = np.array([0.0, 0.95, 1.0, 2.0])
    np.testing.assert_allclose(theta_mollifier(a, 1.0, 0.1), [1.0, 0.5, 0.0, 0.0])


def test_concentration_probe(triangular):
    probe = concentration_probe(triangular, 1.0, eps_ladder(0.2, 4), bandwidth=0.02)
    assert list(probe['delta']) == pytest.approx([0.04, 0.08, 0.12])
    assert (probe['ratio'].diff().dropna() <= 1e-12).all()
    assert probe['ratio'].iloc[-1] <= 0.05


def test_ibp_trivial_direction(samples):
    report = ibp_report(samples, [('one', 'zero'), ('w_e1', 'zero')], [0.5, 0.8],
                        eps_ladder(0.2, 3))
    cells = report[report['eps'] == 'extrap']
    assert len(cells) == 4
    assert cells['passed'].all()
    assert (cells['diff'] == 0.0).all()


def test_ibp_divergence_row(samples):
    ladder = eps_ladder(0.4, 3)
    report = ibp_report(samples, [('one', 'e1'), ('w_e1', 'ramp_e2')], [0.6], ladder)
    cells = report[report['eps'] == 'extrap']
    assert len(cells) == 2
    assert (cells['diff'].abs() <= 5.0 * cells['stderr']).all()
    lhs, _ = ibp_lhs(samples, 'one', 'e1', 0.6, ladder)
    rhs, _ = ibp_rhs(samples, 'one', 'e1', 0.6)
    assert cells.iloc[0]['diff'] == pytest.approx(lhs + rhs)
    assert set(report['eps']) == {f'{e:.6g}' for e in ladder} | {'extrap'}


def test_ibp_summary():
    report = pd.DataFrame({
        'X': ['one', 'one', 'w', 'w'], 'h': ['e1', 'e1', 'e1', 'e2'],
        'eps': ['0.1', 'extrap', 'extrap', 'extrap'], 'passed': [None, True, True, False],
    })
    summary = ibp_summary(report)
    assert summary['cells'] == 3
    assert summary['passed'] == 2
    assert summary['divergence_row_passed']
    assert summary['fraction'] == pytest.approx(2 / 3)


@pytest.fixture(scope='module')
def ibp_samples():
    """n=3, N=64, M=60000; enough paths for the non-trivial IBP cells at r=0.7."""
    grid = TimeGrid(64)
    ensemble = sample_ensemble(3, grid, 60000, RngSpec(41), batch_size=5000)
    spec = SampleSpec(
        functionals={s['id']: functional_from_spec(s, grid, 3) for s in (
            {'id': 'w_e1', 'outer': 'identity', 'directions': ['e1']},
            {'id': 'tanh_ramp_e1', 'outer': 'tanh', 'directions': ['ramp_e1']})},
        directions={'e1': direction_field('e1', grid, 3)},
    )
    return run_pass(ensemble, spec)


@pytest.mark.parametrize('xid', ['w_e1', 'tanh_ramp_e1'])
def test_ibp_nontrivial_cells(ibp_samples, xid):
    ladder = eps_ladder(0.2, 4)
    report = ibp_report(ibp_samples, [(xid, 'e1')], [0.7], ladder)
    cell = report[report['eps'] == 'extrap'].iloc[0]
    assert abs(cell['diff']) <= 3.0 * cell['stderr']
    assert cell['passed']
    lhs, lhs_se = ibp_lhs(ibp_samples, xid, 'e1', 0.7, ladder)
    assert lhs > 3.0 * lhs_se
    assert cell['lhs'] == pytest.approx(lhs)
