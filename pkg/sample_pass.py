"""
Wiener Lab Sample Pass
One streaming pass over an ensemble that turns every batch of paths into a
table of per-path features. Density, surface and Girsanov estimators are all
reductions over this table, so M = 10^6 paths never have to be resident.

Columns (per path):
    batch, path, g, gamma, delta_u, delta_u_over_gamma, degenerate,
    identity_gap, max_abs_dgamma, guard_fraction, z1
    X:<id>, dXu:<id>, deltaX:<id>          per cylindrical functional
    W:<h>, Dgh:<h>, Wtilde:<h>             per direction field
    DXh:<id>|<h>                           per functional and direction
    gu:<V>, log_rho_stoch:<V>, log_rho_repr:<V>, log_inv_rho_B:<V>   per potential
"""

from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np
import pandas as pd

from malliavin_core import CylindricalFunctional, malliavin_batch, tilde_values
from path_engine import PathEnsemble, forward_ito_batch, h_inner_batch, quadrature
from runlog import log

BASE_COLUMNS = ['batch', 'path', 'g', 'gamma', 'delta_u', 'delta_u_over_gamma', 'degenerate',
                'identity_gap', 'max_abs_dgamma', 'guard_fraction', 'z1']


def x_col(xid):
    return f'X:{xid}'


def dxu_col(xid):
    return f'dXu:{xid}'


def delta_x_col(xid):
    return f'deltaX:{xid}'


def w_col(hid):
    return f'W:{hid}'


def dgh_col(hid):
    return f'Dgh:{hid}'


def wtilde_col(hid):
    return f'Wtilde:{hid}'


def dxh_col(xid, hid):
    return f'DXh:{xid}|{hid}'


def potential_cols(vid):
    return {'gu': f'gu:{vid}', 'log_rho_stoch': f'log_rho_stoch:{vid}',
            'log_rho_repr': f'log_rho_repr:{vid}', 'log_inv_rho_B': f'log_inv_rho_B:{vid}'}


@dataclass
class SampleSpec:
    """What the pass computes besides the base Malliavin features."""
    functionals: dict = field(default_factory=dict)
    directions: dict = field(default_factory=dict)
    potentials: dict = field(default_factory=dict)

    def __post_init__(self):
        if 'one' not in self.functionals:
            self.functionals = {'one': CylindricalFunctional.constant(), **self.functionals}


def batch_features(pb, spec):
    """Feature dict for one PathBatch."""
    grid, values, incr = pb.grid, pb.values, pb.increments
    m = pb.size
    mal = malliavin_batch(values, incr, grid)
    gamma = mal['gamma']
    degenerate = mal['degenerate']
    safe_gamma = np.where(degenerate, 1.0, gamma)

    out = {
        'batch': np.full(m, pb.index, dtype=np.int64),
        'path': np.arange(pb.start, pb.start + m, dtype=np.int64),
        'g': mal['g'],
        'gamma': gamma,
        'delta_u': mal['delta_u'],
        'delta_u_over_gamma': mal['delta_u_over_gamma'],
        'degenerate': degenerate,
        'identity_gap': mal['identity_gap'],
        'max_abs_dgamma': mal['max_abs_dgamma'],
        'guard_fraction': mal['guard_fraction'],
        'z1': quadrature(grid.nodes * values[..., 0]),
    }

    grads_by_x = {}
    for xid, X in spec.functionals.items():
        xv, grads = X.evaluate_batch(incr)
        grads_by_x[xid] = grads
        dxu = X.inner_batch(grads, mal['u'])
        out[x_col(xid)] = xv
        out[dxu_col(xid)] = dxu
        out[delta_x_col(xid)] = np.where(
            degenerate, np.nan, xv * mal['delta_u_over_gamma'] - dxu / safe_gamma)

    for hid, h in spec.directions.items():
        h.grid.check_same(grid)
        out[w_col(hid)] = forward_ito_batch(h.values, incr)
        out[dgh_col(hid)] = h_inner_batch(mal['Dg'], h.values[None])
        out[wtilde_col(hid)] = forward_ito_batch(tilde_values(h.values, grid), incr)
        for xid, X in spec.functionals.items():
            if X.directions:
                out[dxh_col(xid, hid)] = grads_by_x[xid] @ X.gram_with(h)
            else:
                out[dxh_col(xid, hid)] = np.zeros(m)

    for vid, V in spec.potentials.items():
        cols = potential_cols(vid)
        for key, arr in V.batch_features(values, incr, grid).items():
            out[cols[key]] = arr
    return out


def _pass_job(job):
    ensemble, spec, b = job
    return batch_features(ensemble.batch(b), spec)


def run_pass(ensemble, spec=None, workers=1):
    """Per-path feature table for the whole ensemble; identical for any worker count."""
    spec = spec or SampleSpec()
    jobs = [(ensemble, spec, b) for b in range(ensemble.num_batches)]
    log(f"Sample pass: M={ensemble.paths} n={ensemble.dim} N={ensemble.grid.steps} "
        f"batches={len(jobs)} workers={workers}")

    if workers > 1 and len(jobs) > 1:
        with Pool(processes=workers) as pool:
            parts = pool.map(_pass_job, jobs, chunksize=1)
    else:
        parts = [_pass_job(job) for job in jobs]

    frame = pd.concat([pd.DataFrame(p) for p in parts], ignore_index=True)
    frame.attrs.update(ensemble.describe())
    frame.attrs['degenerate_count'] = int(frame['degenerate'].sum())
    if frame.attrs['degenerate_count']:
        log(f"{frame.attrs['degenerate_count']} paths with degenerate gamma", 'WARN')
    return frame


def as_samples(source, spec=None, workers=1):
    """Accept either a finished sample table or an ensemble to run the pass on."""
    if isinstance(source, pd.DataFrame):
        return source
    if isinstance(source, PathEnsemble):
        return run_pass(source, spec, workers)
    raise TypeError(f"expected a sample table or PathEnsemble, got {type(source).__name__}")


def provenance(samples):
    """(n, N, M, seed) carried by a sample table."""
    return {k: samples.attrs.get(k) for k in ('n', 'N', 'M', 'seed')}
