"""
Wiener Lab Runner
Runs the verification suites on one shared Brownian ensemble and writes CSV
tables, a check table, summary.json and (optionally) the HTML report.

Usage:
    python run_lab.py invariants --config configs/tiny.json
    python run_lab.py all --config configs/reference.json --workers 8
    python run_lab.py density --seed 7 --paths 200000 --steps 256 --dim 4
    python run_lab.py ensemble save ensemble.bin --config configs/tiny.json
    python run_lab.py ensemble describe ensemble.bin

Exit status is 0 only when every enabled check passes; 2 on configuration or
I/O errors.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

# Add project root to path
PROJECT_DIR = Path(__file__).parent
sys.path.insert(0, str(PROJECT_DIR))

import runlog
from density_lab import (
    central_levels, compare_routes, conditional_product, empirical_cdf, gamma_tail,
    gaussian_kernel, integrate_curve, invert_laplace, inv_gamma_moments, kde_bias_allowance,
    kde_density, laplace_oracle_check, malliavin_cdf, malliavin_density, malliavin_density_X,
    resolve_bandwidth, tail_mass,
)
from gradient_sde import (
    bounds_check, change_of_measure_check, collapse_check, empirical_density_gu,
    euler_strong_convergence, girsanov_refinement, gradient_check, lipschitz_probe,
    normalisation_check, phi1_density, potential_from_name, theta_slab,
)
from lab_config import load_config
from lab_errors import ConfigError, EnsembleFormatError, GridMismatch, LabError
from lab_stats import mean_and_se, paired_difference, z_score
from malliavin_core import linear_path_oracle, malliavin_record, suffix_trapezoid, tilde_values
from path_engine import (
    coarsen, describe_ensemble, forward_ito_batch, h_inner_batch, increment_statistics,
    linear_test_path, load_ensemble, persist_ensemble,
)
from runlog import banner, log
from sample_pass import SampleSpec, dxh_col, potential_cols, provenance, run_pass, w_col, x_col
from surface_lab import concentration_probe, ibp_report, ibp_summary, slab_convergence, surface_integral

SUITES = ['invariants', 'density', 'surface', 'ibp', 'sde']
EXECUTION_KEYS = ('workers', 'plots', 'out_dir')
FLOAT_FORMAT = '%.12g'


# ===== CHECK BOOKKEEPING =====

@dataclass
class CheckBook:
    """Rows of (suite, check, detail, value, reference, stderr, z, tolerance, passed)."""
    provenance: dict
    rows: list = field(default_factory=list)

    def add(self, suite, check, detail='', value=np.nan, reference=np.nan, stderr=np.nan,
            tolerance=np.nan, passed=True, z=None):
        if z is None:
            z = z_score(value, reference, stderr) if np.isfinite(stderr) and np.isfinite(value) \
                and np.isfinite(reference) else np.nan
        self.rows.append({'suite': suite, 'check': check, 'detail': detail,
                          'value': float(value), 'reference': float(reference),
                          'stderr': float(stderr), 'z': float(z), 'tolerance': float(tolerance),
                          'passed': bool(passed), **self.provenance, 'method': suite})
        if not passed:
            log(f"[{suite}] {check} {detail}: FAILED (value={value:.6g}, reference={reference:.6g})",
                'WARNING')

    def within(self, suite, check, detail, value, reference, stderr, tolerance):
        """Pass when |value - reference| <= tolerance."""
        self.add(suite, check, detail, value, reference, stderr, tolerance,
                 abs(float(value) - float(reference)) <= tolerance)

    def guarded(self, suite, check, fn):
        """Run one check group; a LabError becomes a failed row instead of a crash."""
        try:
            fn()
        except LabError as exc:
            log(f"[{suite}] {check}: {type(exc).__name__}: {exc}", 'ERROR')
            self.add(suite, check, f'{type(exc).__name__}: {exc}', passed=False)

    def frame(self):
        return pd.DataFrame(self.rows)

    def summary(self):
        frame = self.frame()
        if frame.empty:
            return {'checks': 0, 'passed': 0, 'failed': [], 'worst_abs_z': None, 'suites': {}}
        z = frame['z'].abs()
        z = z[np.isfinite(z)]
        suites = {s: {'checks': int(len(g)), 'passed': int(g['passed'].sum())}
                  for s, g in frame.groupby('suite', sort=True)}
        failed = frame[~frame['passed']]
        return {'checks': int(len(frame)), 'passed': int(frame['passed'].sum()),
                'failed': [f"{r.suite}/{r.check} {r.detail}".strip() for r in failed.itertuples()],
                'worst_abs_z': float(z.max()) if len(z) else None, 'suites': suites}


@dataclass
class LabRun:
    config: object
    ensemble: object
    samples: pd.DataFrame
    checks: CheckBook
    tables: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.config.dim

    def bandwidth(self):
        return resolve_bandwidth(self.config.bandwidth, self.samples['g'].to_numpy())

    def emit(self, name, frame):
        prov = self.checks.provenance
        frame = frame.copy()
        for i, key in enumerate(('n', 'N', 'M', 'seed')):
            if key not in frame.columns:
                frame.insert(i, key, prov[key])
        if 'method' not in frame.columns:
            frame.insert(4, 'method', name)
        self.tables[name] = frame


# ===== SUITES =====

def kernel_allowance(samples, xid, r, h):
    """Leading kernel bias at r of the X-weighted KDE (X = 'one' for f1 itself)."""
    curve = conditional_product(samples, xid, np.array([r - h, r, r + h]), h)
    return float(kde_bias_allowance(curve, h)[1])


def suite_invariants(run):
    s, checks, grid = run.samples, run.checks, run.ensemble.grid
    name = 'invariants'

    def identities():
        gap = float(s['identity_gap'].max())
        checks.add(name, 'malliavin_identity', '<Dg,u>_H = gamma, max over paths', gap, 0.0,
                   tolerance=1e-8, passed=gap <= 1e-8)
        worst = float(s['max_abs_dgamma'].max())
        checks.add(name, 'dgamma_bound', '|D gamma| <= 1, max over nodes and paths', worst, 1.0,
                   tolerance=1e-6, passed=worst <= 1.0 + 1e-6)
        checks.add(name, 'degenerate_gamma', 'paths with gamma below tolerance',
                   float(s['degenerate'].sum()), 0.0, passed=True)

    def unit_oracle():
        rec = malliavin_record(linear_test_path(grid, 1))
        for label, value, ref in (('g', rec.g, 1 / 6), ('gamma', rec.gamma, 1 / 3),
                                  ('u_dgamma', rec.u_dgamma, 1 / 3)):
            checks.within(name, 'unit_oracle', f'x=t e1, n=1: {label}', value, ref, np.nan, 1e-3)
        for n in sorted({1, run.n}):
            oracle = linear_path_oracle(grid.steps, n)
            ref = 1.0 - 2.0 * (n - 1) * np.log(2.0)
            checks.within(name, 'unit_oracle', f'x=t e1, n={n}: delta_u (N, 2N extrapolated)',
                          oracle['delta_u'], ref, np.nan, 1e-3)
            checks.within(name, 'unit_oracle',
                          f'x=t e1, n={n}: delta_u_over_gamma (N, 2N extrapolated)',
                          oracle['delta_u_over_gamma'], 3.0 * ref + 3.0, np.nan, 3e-3)

    def tilde_identity():
        if grid.steps % 2:
            checks.add(name, 'tilde_identity', 'skipped: odd N', passed=True)
            return
        pb = run.ensemble.batch(0)
        m = min(pb.size, run.config.refinement_paths)
        pb.values, pb.increments = pb.values[:m], pb.increments[:m]
        gaps = []
        for batch in (pb, coarsen(pb, 2)):
            h = np.zeros((batch.grid.steps + 1, run.n))
            h[:, 0] = 1.0
            dg = suffix_trapezoid(batch.values, batch.grid)
            gap = np.abs(h_inner_batch(dg, h[None])
                         - forward_ito_batch(tilde_values(h, batch.grid), batch.increments))
            gaps.append(float(gap.max()))
        ratio = gaps[0] / gaps[1] if gaps[1] > 0 else 0.0
        checks.add(name, 'tilde_identity', f'max |<Dg,e1> - W(e1~)| ratio N vs N/2 '
                   f'({gaps[0]:.3g} vs {gaps[1]:.3g})', ratio, 0.5, tolerance=0.15,
                   passed=abs(ratio - 0.5) <= 0.15)

    def increments():
        stats = increment_statistics(run.ensemble)
        inc, end = stats['increments'], stats['endpoint']
        var = np.atleast_1d(inc.var())
        var_se = np.sqrt(2.0) * grid.dt / np.sqrt(inc.count)
        for i, v in enumerate(var):
            checks.within(name, 'increment_variance', f'coordinate {i + 1}', v, grid.dt, var_se,
                          4.0 * var_se)
        for i, (mean, se) in enumerate(zip(np.atleast_1d(end.mean), np.atleast_1d(end.sem()))):
            checks.within(name, 'endpoint_mean', f'coordinate {i + 1}', mean, 0.0, se, 4.0 * se)

    def skorohod_mean():
        ok = ~s['degenerate'].to_numpy()
        mean, se = mean_and_se(s['delta_u'].to_numpy()[ok], s['batch'].to_numpy()[ok])
        checks.within(name, 'skorohod_mean', 'E[delta(u)] = 0', mean, 0.0, se, 4.0 * se)

    def duality():
        batch = s['batch'].to_numpy()
        for spec in run.config.functionals:
            xid = spec['id']
            for hid in run.config.ibp_suite['directions']:
                a = s[dxh_col(xid, hid)].to_numpy()
                b = s[x_col(xid)].to_numpy() * s[w_col(hid)].to_numpy()
                diff, se = paired_difference(a, b, batch)
                checks.within(name, 'cylindrical_duality', f'E<DX,h> = E[X W(h)] X={xid} h={hid}',
                              diff, 0.0, se, 3.0 * se + 1e-12)

    for check, fn in (('identities', identities), ('unit_oracle', unit_oracle),
                      ('tilde_identity', tilde_identity), ('increments', increments),
                      ('skorohod_mean', skorohod_mean), ('duality', duality)):
        checks.guarded(name, check, fn)
    run.emit('malliavin_records', s[['batch', 'path', 'g', 'gamma', 'delta_u', 'delta_u_over_gamma',
                                     'identity_gap', 'max_abs_dgamma', 'guard_fraction',
                                     'degenerate']].head(100))


def suite_density(run):
    s, checks, cfg = run.samples, run.checks, run.config
    name = 'density'
    levels = cfg.levels(s['g'].to_numpy())
    h = run.bandwidth()
    central = central_levels(levels)
    state = {}

    def curves():
        kde = kde_density(s, levels, h)
        mall = malliavin_density(s, levels)
        inv = invert_laplace(run.n, levels, cfg.stehfest_order)
        state.update(kde=kde, mall=mall, inv=inv)
        frames = [kde.to_frame(), mall.to_frame(), inv.to_frame()]

        tail = tail_mass(s, levels)
        for curve in (kde, mall):
            total = integrate_curve(curve) + tail
            checks.within(name, 'normalisation', f'{curve.method}: integral + tail mass {tail:.3g}',
                          total, 1.0, np.nan, 0.02)
        checks.add(name, 'nonnegative', 'kde >= 0', float(kde.estimate.min()), 0.0,
                   passed=bool((kde.estimate >= 0).all()))
        wide = np.linspace(1e-3, 20.0 + 5.0 * run.n, 4000)
        total = integrate_curve(invert_laplace(run.n, wide, cfg.stehfest_order))
        checks.within(name, 'normalisation', 'laplace-inversion over a wide grid', total, 1.0,
                      np.nan, 0.01)
        for xid in ['one'] + [spec['id'] for spec in cfg.functionals]:
            fx = malliavin_density_X(s, xid, levels)
            cp = conditional_product(s, xid, levels, h)
            fx.method, cp.method = f'malliavin:{xid}', f'conditional-product:{xid}'
            frames += [fx.to_frame(), cp.to_frame()]
        one = malliavin_density_X(s, 'one', levels)
        checks.add(name, 'f_X_constant', 'X = 1 reproduces the Malliavin density bit for bit',
                   float(np.abs(one.estimate - mall.estimate).max()), 0.0,
                   passed=bool(np.array_equal(one.estimate, mall.estimate)))
        run.emit('density_curves', pd.concat(frames, ignore_index=True))

    def triangulation():
        kde, inv = state['kde'], state['inv']
        allowance = kde_bias_allowance(kde, h)
        idx = [int(np.argmin(np.abs(levels - r))) for r in central]
        table = compare_routes(s, central, 'kde', 'malliavin', h, 'one', allowance[idx])
        for row in table.itertuples():
            checks.add(name, 'triangulation', f'kde vs malliavin r={row.r:.4g}', row.diff, 0.0,
                       row.stderr, row.tolerance, row.passed)
        for i, r in zip(idx, central):
            ref = inv.estimate[i]
            tol = 0.05 * abs(ref) + 3.0 * kde.stderr[i] + allowance[i]
            checks.within(name, 'triangulation', f'kde vs laplace-inversion r={r:.4g}',
                          kde.estimate[i], ref, kde.stderr[i], tol)
        frames = [table.assign(route='kde-malliavin', X='one')]
        for spec in cfg.functionals:
            fx_allowance = [kernel_allowance(s, spec['id'], r, h) for r in central]
            fx_table = compare_routes(s, central, 'kde', 'malliavin', h, spec['id'], fx_allowance)
            for row in fx_table.itertuples():
                checks.add(name, 'f_X_identity',
                           f"E[X|g=r] f1(r) vs f_X(r), X={spec['id']} r={row.r:.4g}",
                           row.diff, 0.0, row.stderr, row.tolerance, row.passed)
            frames.append(fx_table.assign(route='conditional-product-malliavin', X=spec['id']))
        run.emit('density_triangulation', pd.concat(frames, ignore_index=True))

    def laplace():
        table = laplace_oracle_check(s, cfg.lambdas, run.n)
        for row in table.to_dict('records'):
            checks.add(name, 'laplace_oracle', f"lambda={row['lambda']:g}", row['mc'], row['oracle'],
                       row['stderr'], 3.0 * row['stderr'] + 2e-3, row['passed'])
        coarse_cfg = cfg.with_overrides(seed=(cfg.seed + 1) % 2 ** 64,
                                        paths=min(cfg.paths, 100_000),
                                        steps=min(cfg.steps, 256))
        coarse = run_pass(coarse_cfg.ensemble(), SampleSpec(), cfg.workers)
        independent = laplace_oracle_check(coarse, cfg.lambdas, run.n)
        for row in independent.to_dict('records'):
            checks.add(name, 'laplace_oracle_independent', f"lambda={row['lambda']:g}",
                       row['mc'], row['oracle'], row['stderr'], 3.0 * row['stderr'] + 2e-3,
                       row['passed'])
        run.emit('laplace', pd.concat([table.assign(ensemble='main'),
                                       independent.assign(ensemble='independent')],
                                      ignore_index=True))

    def cdf():
        emp = empirical_cdf(s, levels)
        mal = malliavin_cdf(s, levels)
        checks.add(name, 'cdf_monotone', 'empirical F1 nondecreasing', 0.0, 0.0,
                   passed=bool(np.all(np.diff(emp.estimate) >= 0)))
        g = s['g'].to_numpy()
        batch = s['batch'].to_numpy()
        w = np.where(s['degenerate'].to_numpy(), 0.0, s['delta_u_over_gamma'].to_numpy())
        for r in central:
            diff, se = paired_difference((g > r).astype(float), w * np.maximum(g - r, 0.0), batch)
            checks.within(name, 'cdf_reproduction', f'P(g>r) vs E[delta(u/gamma)(g-r)+] r={r:.4g}',
                          diff, 0.0, se, 3.0 * se)
        run.emit('cdf', pd.concat([emp.to_frame(), mal.to_frame()], ignore_index=True))

    def moments():
        rows = []
        for p in cfg.moment_exponents:
            rep = inv_gamma_moments(s, p)
            if p == 0:
                checks.add(name, 'inverse_moment', 'p=0 gives 1 exactly', rep.estimate, 1.0,
                           passed=rep.estimate == 1.0)
            else:
                checks.add(name, 'inverse_moment', f"p={p:g} finite {' '.join(rep.flags)}".strip(),
                           rep.estimate, np.nan, rep.stderr,
                           passed=bool(np.isfinite(rep.estimate)))
            rows.append({'p': p, 'estimate': rep.estimate, 'stderr': rep.stderr,
                         'flags': ' '.join(rep.flags), **rep.extras})
        run.emit('gamma_moments', pd.DataFrame(rows))

        tail = gamma_tail(s, cfg.eta_ladder)
        ex = tail.extras
        checks.within(name, 'z_variance', 'Var(int t B1 dt) = 2/15', ex['z1_variance'],
                      ex['z1_variance_reference'], ex['z1_variance_se'], 4.0 * ex['z1_variance_se'])
        for row in tail.tail.itertuples():
            checks.add(name, 'chi2_tail_bound', f'eta={row.eta:g}', row.prob, row.chi2_bound,
                       row.stderr, passed=row.prob <= row.chi2_bound + 3.0 * row.stderr)
        if np.isfinite(tail.slope) and run.n >= 2:
            checks.add(name, 'gamma_tail_slope', f'log-log slope, band {tail.slope_band}',
                       tail.slope, run.n - 0.5, tail.slope_se, passed=tail.slope >= run.n - 0.5)
        else:
            checks.add(name, 'gamma_tail_slope', 'skipped: fewer than two non-empty bins or n < 2',
                       passed=True)
        run.emit('gamma_tail', tail.tail)

    for check, fn in (('curves', curves), ('triangulation', triangulation), ('laplace', laplace),
                      ('cdf', cdf), ('moments', moments)):
        if check == 'triangulation' and 'kde' not in state:
            continue
        checks.guarded(name, check, fn)


def suite_surface(run):
    s, checks, cfg = run.samples, run.checks, run.config
    name = 'surface'
    ladder = cfg.ladder()
    h = run.bandwidth()
    g = s['g'].to_numpy()
    batch = s['batch'].to_numpy()
    ladders, probes, estimates = [], [], []

    def level(r):
        est = surface_integral(s, None, r, ladder, h, name='one')
        kde_contrib = gaussian_kernel(r, g, h)
        diff, se = paired_difference(est.ladder.contrib, kde_contrib, batch)
        tol = 3.0 * se + kernel_allowance(s, 'one', r, h)
        checks.within(name, 'total_mass', f'slab mass vs f1 r={r:.4g}', diff, 0.0, se, tol)
        checks.add(name, 'positivity', f'X=1 r={r:.4g}', est.value, 0.0,
                   passed=est.value >= 0 and est.routes['conditional-product'][0] >= 0)
        estimates.append({'r': r, 'X': 'one', 'slab': est.value, 'slab_se': est.stderr,
                          'conditional_product': est.routes['conditional-product'][0],
                          'conditional_product_se': est.routes['conditional-product'][1]})
        ladders.append(est.ladder.to_frame().assign(X='one'))
        _, order = slab_convergence(est.ladder)
        checks.add(name, 'slab_convergence', f'first-order fit r={r:.4g}', order, 1.0,
                   passed=True)

        for spec in cfg.functionals:
            xid = spec['id']
            est_x = surface_integral(s, xid, r, ladder, h, name=xid)
            cp = gaussian_kernel(r, g, h) * s[x_col(xid)].to_numpy()
            diff, se = paired_difference(est_x.ladder.contrib, cp, batch)
            checks.within(name, 'route_consistency', f'X={xid} r={r:.4g}', diff, 0.0, se,
                          3.0 * se + kernel_allowance(s, xid, r, h))
            estimates.append({'r': r, 'X': xid, 'slab': est_x.value, 'slab_se': est_x.stderr,
                              'conditional_product': est_x.routes['conditional-product'][0],
                              'conditional_product_se': est_x.routes['conditional-product'][1]})
            ladders.append(est_x.ladder.to_frame().assign(X=xid))

        probe = concentration_probe(s, r, ladder, h)
        worst = float(probe['ratio'].iloc[-1])
        checks.add(name, 'concentration', f'smoothed 1(|g-r|>delta) / f1 r={r:.4g}', worst, 0.0,
                   tolerance=0.05, passed=worst <= 0.05)
        probes.append(probe)

    for r in cfg.ibp_suite['levels']:
        checks.guarded(name, f'level r={r:g}', lambda r=r: level(r))
    if estimates:
        run.emit('surface', pd.DataFrame(estimates))
        run.emit('slab_ladders', pd.concat(ladders, ignore_index=True))
    if probes:
        run.emit('concentration', pd.concat(probes, ignore_index=True))


def suite_ibp(run):
    cfg, checks = run.config, run.checks
    name = 'ibp'
    suite = [(xid, hid) for xid in cfg.ibp_suite['functionals']
             for hid in cfg.ibp_suite['directions']]

    def report():
        table = ibp_report(run.samples, suite, cfg.ibp_suite['levels'], cfg.ladder())
        summary = ibp_summary(table)
        checks.add(name, 'pass_fraction', f"{summary['passed']}/{summary['cells']} cells within 3 SE",
                   summary['fraction'], 0.95, passed=summary['fraction'] >= 0.95)
        checks.add(name, 'divergence_row', 'X = 1 passes for every h', float(
            summary['divergence_row_passed']), 1.0, passed=summary['divergence_row_passed'])
        run.emit('ibp', table)

    checks.guarded(name, 'report', report)


def suite_sde(run):
    s, checks, cfg = run.samples, run.checks, run.config
    name = 'sde'
    levels = cfg.levels(s['g'].to_numpy())
    central = central_levels(levels)
    h = run.bandwidth()
    g = s['g'].to_numpy()
    batch = s['batch'].to_numpy()
    curves, tables = [], []

    def potential(vid):
        V = potential_from_name(vid, run.n)
        cols = potential_cols(vid)
        grad_err, lap_err = gradient_check(V, run.n)
        checks.add(name, 'gradient_consistency', f'{vid}: grad V vs finite differences', grad_err,
                   0.0, tolerance=1e-6, passed=grad_err <= 1e-6)
        checks.add(name, 'gradient_consistency', f'{vid}: tr hess V vs finite differences',
                   lap_err, 0.0, tolerance=1e-3, passed=lap_err <= 1e-3)

        for row in normalisation_check(s, vid).itertuples():
            checks.within(name, 'normalisation', f'{vid}: E[{row.quantity}] = 1', row.mean, 1.0,
                          row.stderr, 3.0 * row.stderr + 1e-12)
        inside = bounds_check(s, V)
        checks.add(name, 'bounds', f'{vid}: integral-free rho1 inside closed-form bounds',
                   inside['repr_inside'], 1.0, passed=inside['repr_inside'] == 1.0)
        checks.add(name, 'bounds', f'{vid}: rho1(B)^-1 inside closed-form bounds',
                   inside['inv_inside'], 1.0, passed=inside['inv_inside'] == 1.0)

        com = change_of_measure_check(s, vid, central, cfg.lambdas)
        for row in com.itertuples():
            checks.add(name, 'change_of_measure', f'{vid}: {row.identity}', row.diff, 0.0,
                       row.stderr, passed=row.passed)
        tables.append(com)

        phi = phi1_density(s, vid, levels, h)
        emp = empirical_density_gu(s, vid, levels, h)
        curves.extend([phi.to_frame().assign(potential=vid), emp.to_frame().assign(potential=vid)])
        inv_rho = np.exp(s[cols['log_inv_rho_B']].to_numpy())
        tail = float(np.mean(inv_rho * ((g < levels[0]) | (g > levels[-1]))))
        checks.within(name, 'phi1_normalisation', f'{vid}: integral + tail {tail:.3g}',
                      integrate_curve(phi) + tail, 1.0, np.nan, 0.03)
        allowance = kde_bias_allowance(phi, h) + kde_bias_allowance(emp, h)
        gu = s[cols['gu']].to_numpy()
        for r in central:
            i = int(np.argmin(np.abs(levels - r)))
            diff, se = paired_difference(gaussian_kernel(r, g, h) * inv_rho,
                                         gaussian_kernel(r, gu, h), batch)
            checks.within(name, 'phi1_triangulation', f'{vid}: phi1 vs KDE of g(u) r={r:.4g}',
                          diff, 0.0, se, 3.0 * se + allowance[i])

        for r in cfg.ibp_suite['levels']:
            est = theta_slab(s, vid, None, r, cfg.ladder(), h)
            diff, se = paired_difference(est.ladder.contrib, gaussian_kernel(r, g, h) * inv_rho,
                                         batch)
            curve = phi1_density(s, vid, np.array([r - h, r, r + h]), h)
            tol = 3.0 * se + kde_bias_allowance(curve, h)[1]
            checks.within(name, 'theta_total_mass', f'{vid}: theta_r mass vs phi1 r={r:.4g}',
                          diff, 0.0, se, tol)

        if V.is_zero:
            for label, ok in collapse_check(s, vid).items():
                checks.add(name, 'zero_potential_collapse', label, float(ok), 1.0, passed=ok)
            phi_same = np.array_equal(phi.estimate, kde_density(s, levels, h).estimate)
            checks.add(name, 'zero_potential_collapse', 'phi1 equals f1 KDE bit for bit',
                       float(phi_same), 1.0, passed=phi_same)
            return

        table, order = euler_strong_convergence(V, run.ensemble, cfg.refinement_paths)
        checks.add(name, 'euler_strong_order', f'{vid}: fitted order', order, 1.0,
                   passed=bool(np.isfinite(order) and order > 0))
        tables.append(table.assign(potential=vid, experiment='euler_strong'))
        table, order = girsanov_refinement(V, run.ensemble, cfg.refinement_paths)
        checks.add(name, 'girsanov_refinement', f'{vid}: median |log gap| fitted order', order,
                   0.5, passed=bool(np.isfinite(order) and order > 0))
        tables.append(table.assign(potential=vid, experiment='girsanov_refinement'))
        probe = lipschitz_probe(V, run.ensemble, cfg.refinement_paths)
        checks.add(name, 'lipschitz_probe', f'{vid}: max change vs L delta', probe['max_change'],
                   probe['bound'], passed=probe['passed'])

    for vid in cfg.potentials:
        checks.guarded(name, f'potential {vid}', lambda vid=vid: potential(vid))
    if curves:
        run.emit('sde_densities', pd.concat(curves, ignore_index=True))
    if tables:
        run.emit('sde_checks', pd.concat(tables, ignore_index=True))


SUITE_RUNNERS = {
    'invariants': suite_invariants,
    'density': suite_density,
    'surface': suite_surface,
    'ibp': suite_ibp,
    'sde': suite_sde,
}


# ===== ORCHESTRATION =====

def sample_spec(config, suites, grid):
    """Only compute the columns the requested suites read."""
    functionals = config.build_functionals(grid)
    directions = config.build_directions(grid)
    potentials = {}
    if 'sde' in suites:
        potentials = {vid: potential_from_name(vid, config.dim) for vid in config.potentials}
    return SampleSpec(functionals, directions, potentials)


def provenance_json(config):
    data = {k: v for k, v in config.to_dict().items() if k not in EXECUTION_KEYS}
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def write_csv(frame, file, header):
    """CSV with a '# config:' provenance line; read back with pd.read_csv(file, comment='#')."""
    with open(file, 'w', encoding='utf-8', newline='') as f:
        f.write(f'# config: {header}\n')
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def save_results(run, out_dir):
    """Write every table, the check table and summary.json; returns the file list."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = provenance_json(run.config)
    files = []
    for name in sorted(run.tables):
        file = out_dir / f'{name}.csv'
        write_csv(run.tables[name], file, header)
        files.append(file)

    checks_file = out_dir / 'checks.csv'
    write_csv(run.checks.frame(), checks_file, header)
    files.append(checks_file)

    summary = run.checks.summary()
    summary['config'] = json.loads(header)
    summary_file = out_dir / 'summary.json'
    with open(summary_file, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    files.append(summary_file)
    print(f"[OK] Saved {len(files)} files to {out_dir}")
    return files, summary


def run(config, suite='all', ensemble_file=None):
    """Run the requested suite(s); returns (LabRun, summary)."""
    suites = SUITES if suite == 'all' else [suite]
    banner(f"WIENER LAB: {suite.upper()}")
    log(f"n={config.dim} N={config.steps} M={config.paths} seed={config.seed} "
        f"workers={config.workers}")

    if ensemble_file:
        ensemble = load_ensemble(ensemble_file, expected_steps=config.steps,
                                 expected_dim=config.dim, expected_paths=config.paths)
        log(f"Loaded ensemble from {ensemble_file}")
    else:
        ensemble = config.ensemble()

    samples = run_pass(ensemble, sample_spec(config, suites, ensemble.grid), config.workers)
    prov = provenance(samples)
    lab = LabRun(config, ensemble, samples, CheckBook(prov))
    for name in suites:
        banner(f"Suite: {name}")
        SUITE_RUNNERS[name](lab)

    files, summary = save_results(lab, config.out_dir)
    if config.plots:
        try:
            from reports.generate_report import render_report
            files.append(render_report({**lab.tables, 'checks': lab.checks.frame()}, summary,
                                       config.out_dir))
        except ImportError as exc:
            log(f"Report skipped: {exc}", 'WARNING')

    status = 'ALL CHECKS PASSED' if not summary['failed'] else f"{len(summary['failed'])} CHECKS FAILED"
    banner(f"{status} ({summary['passed']}/{summary['checks']})",
           'INFO' if not summary['failed'] else 'WARNING')
    return lab, summary


# ===== CLI =====

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file (defaults when omitted)')
    common.add_argument('--seed', type=int, help='master seed')
    common.add_argument('--paths', type=int, help='number of paths M')
    common.add_argument('--steps', type=int, help='grid steps N')
    common.add_argument('--dim', type=int, help='Brownian dimension n')
    common.add_argument('--out', help='output directory')
    common.add_argument('--suite', choices=SUITES + ['all'], help='overrides the subcommand')
    common.add_argument('--potential', action='append',
                        help="potential name (zero, cos:a, bump:a); repeatable")
    common.add_argument('--workers', type=int, help='worker processes')
    common.add_argument('--ensemble', help='load the ensemble from a binary file')
    common.add_argument('--no-plots', action='store_true', help='skip the HTML report')
    common.add_argument('--quiet', action='store_true', help='log to file only')

    parser = argparse.ArgumentParser(description='Wiener-space level-set laboratory')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in SUITES + ['all']:
        sub.add_parser(name, parents=[common], help=f'run the {name} suite')
    ens = sub.add_parser('ensemble', parents=[common], help='save or describe a binary ensemble')
    ens.add_argument('action', choices=['save', 'describe'])
    ens.add_argument('file')
    return parser


def config_from_args(args):
    config = load_config(args.config)
    return config.with_overrides(
        seed=args.seed, paths=args.paths, steps=args.steps, dim=args.dim, out_dir=args.out,
        potentials=args.potential, workers=args.workers,
        plots=False if args.no_plots else None)


def main(argv=None):
    args = build_parser().parse_args(argv)
    runlog.QUIET = args.quiet
    try:
        if args.command == 'ensemble' and args.action == 'describe':
            meta = describe_ensemble(args.file)
            print(json.dumps(meta, indent=2, sort_keys=True))
            return 0
        config = config_from_args(args)
        if args.command == 'ensemble':
            ensemble = config.ensemble()
            persist_ensemble(ensemble, args.file)
            print(f"[OK] Saved ensemble {ensemble.describe()} to {args.file}")
            return 0
        suite = args.suite or args.command
        _, summary = run(config, suite, args.ensemble)
    except (ConfigError, EnsembleFormatError, GridMismatch, OSError) as exc:
        log(f"{type(exc).__name__}: {exc}", 'ERROR')
        return 2
    return 0 if not summary['failed'] else 1


if __name__ == "__main__":
    sys.exit(main())
