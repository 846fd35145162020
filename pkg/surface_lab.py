"""
Wiener Lab Surface Measures
Realizes the surface measure on {g = r} as the limit of slab measures
(1/eps) 1_{r < g <= r+eps} mu, extrapolated linearly in eps over a halving
ladder, and verifies the integration-by-parts identity

    int_{g=r} X <Dg, h>_H dsigma_r = -E[1_{g<r} (X W(h) - <DX, h>_H)]

cell by cell on a shared sample table.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from density_lab import gaussian_kernel, resolve_bandwidth
from lab_errors import EmptySlab
from lab_stats import fit_line, mean_and_se, z_score
from sample_pass import as_samples, dgh_col, dxh_col, provenance, w_col, x_col

MIN_SLAB_COUNT = 100


def eps_ladder(start=0.2, rungs=6):
    """eps_k = start * 2^-k, k = 0..rungs-1."""
    return start * 0.5 ** np.arange(int(rungs))


@dataclass
class SlabLadder:
    """Per-eps slab estimates at level r and their linear-in-eps extrapolation."""
    r: float
    eps: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    counts: np.ndarray
    extrapolated: float
    extrapolated_se: float
    side: str = 'above'
    flags: list = field(default_factory=list)
    contrib: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.eps) > 1 and not np.all(np.diff(self.eps) < 0):
            raise ValueError("eps ladder must be strictly decreasing")

    @property
    def usable(self):
        return self.counts >= MIN_SLAB_COUNT

    def to_frame(self):
        return pd.DataFrame({'r': self.r, 'eps': self.eps, 'estimate': self.estimates,
                             'stderr': self.stderrs, 'count': self.counts, 'usable': self.usable,
                             'side': self.side})


@dataclass
class SurfaceEstimate:
    """Surface integral at level r; both routes kept side by side."""
    r: float
    integrand: str
    value: float
    stderr: float
    route: str = 'slab-extrapolation'
    routes: dict = field(default_factory=dict)
    ladder: SlabLadder = field(default=None, repr=False)


def _slab_mask(g, r, eps, side):
    if side == 'above':
        return (g > r) & (g <= r + eps)
    if side == 'below':
        return (g > r - eps) & (g < r)
    raise ValueError(f"slab side must be 'above' or 'below', got '{side}'")


def _integrand(samples, x):
    if x is None:
        return np.ones(len(samples))
    if isinstance(x, str):
        return samples[x].to_numpy() if x in samples.columns else samples[x_col(x)].to_numpy()
    return np.asarray(x, dtype=float)


def slab_contributions(samples, x, r, eps, side='above', column='g'):
    """Per-path X 1_slab / eps and the slab occupancy."""
    g = samples[column].to_numpy()
    mask = _slab_mask(g, r, eps, side)
    return np.where(mask, _integrand(samples, x), 0.0) / eps, int(mask.sum())


def slab_integral(samples, x, r, eps, side='above', column='g'):
    """(1/eps) E[X 1_{r<g<=r+eps}]; returns (value, stderr, count)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    samples = as_samples(samples)
    contrib, count = slab_contributions(samples, x, r, eps, side, column)
    if count == 0:
        raise EmptySlab(f"no path with {column} in the {side} slab of width {eps:.3g} at r={r:.4g}")
    value, se = mean_and_se(contrib, samples['batch'].to_numpy())
    return float(value), float(se), count


def extrapolation_weights(eps):
    """Row of the least-squares solve giving the intercept of a + b eps."""
    eps = np.asarray(eps, dtype=float)
    design = np.column_stack([np.ones_like(eps), eps])
    return np.linalg.pinv(design)[0]


def slab_ladder(samples, x, r, ladder, side='above', column='g', min_count=MIN_SLAB_COUNT):
    """Slab estimates for every rung plus the per-path extrapolated contribution."""
    samples = as_samples(samples)
    ladder = np.asarray(ladder, dtype=float)
    batch = samples['batch'].to_numpy()
    per_rung, est, se, counts = [], [], [], []
    for eps in ladder:
        contrib, count = slab_contributions(samples, x, r, eps, side, column)
        mean, sem = mean_and_se(contrib, batch)
        per_rung.append(contrib)
        est.append(mean)
        se.append(sem)
        counts.append(count)
    counts = np.array(counts)
    if counts.max(initial=0) == 0:
        raise EmptySlab(f"every slab at r={r:.4g} is empty")

    usable = np.flatnonzero(counts >= min_count)
    flags = []
    if len(usable) >= 2:
        weights = extrapolation_weights(ladder[usable])
        contrib = sum(w * per_rung[i] for w, i in zip(weights, usable))
    else:
        # fall back to the narrowest usable (else non-empty) rung
        i = usable[-1] if len(usable) else int(np.flatnonzero(counts)[-1])
        contrib = per_rung[i]
        flags.append('no-extrapolation')
    value, sem = mean_and_se(contrib, batch)
    return SlabLadder(float(r), ladder, np.array(est), np.array(se), counts, float(value),
                      float(sem), side, flags, contrib)


def surface_integral(samples, x, r, ladder, bandwidth='silverman', side='above', column='g',
                     name=None):
    """Slab-extrapolated surface integral of X at level r, plus the conditional-product route."""
    samples = as_samples(samples)
    built = slab_ladder(samples, x, r, ladder, side, column)
    g = samples[column].to_numpy()
    h = resolve_bandwidth(bandwidth, g)
    cp, cp_se = mean_and_se(gaussian_kernel(r, g, h) * _integrand(samples, x),
                            samples['batch'].to_numpy())
    label = name or (x if isinstance(x, str) else 'custom')
    return SurfaceEstimate(
        float(r), label, built.extrapolated, built.extrapolated_se,
        routes={'slab-extrapolation': (built.extrapolated, built.extrapolated_se),
                'conditional-product': (float(cp), float(cp_se))},
        ladder=built)


def theta_mollifier(a, r, eps):
    """Lipschitz approximation of 1_{a <= r}: 1 below r-eps, 0 above r, linear between."""
    return np.clip((r - np.asarray(a, dtype=float)) / eps, 0.0, 1.0)


def concentration_probe(samples, r, ladder, bandwidth='silverman', multiples=(2.0, 4.0, 6.0),
                        column='g'):
    """Surface integrals of smoothed 1_{|g-r|>delta} for delta = multiples of the bandwidth.

    The smoothed indicator is built from two theta ramps of width delta/2, one on each side
    of r; its surface integral should be small against f1(r).
    """
    samples = as_samples(samples)
    g = samples[column].to_numpy()
    h = resolve_bandwidth(bandwidth, g)
    mass = surface_integral(samples, None, r, ladder, h, column=column, name='one')
    rows = []
    for k in multiples:
        delta = k * h
        x = theta_mollifier(g, r - 0.5 * delta, 0.5 * delta) \
            + 1.0 - theta_mollifier(g, r + delta, 0.5 * delta)
        small = np.asarray(ladder)[np.asarray(ladder) <= 0.5 * delta]
        slab_value = np.nan
        if len(small):
            try:
                slab_value = slab_ladder(samples, x, r, small, column=column).extrapolated
            except EmptySlab:
                pass
        cp, cp_se = mean_and_se(gaussian_kernel(r, g, h) * x, samples['batch'].to_numpy())
        rows.append({'r': r, 'delta': delta, 'slab': slab_value, 'conditional_product': cp,
                     'stderr': cp_se, 'mass': mass.value,
                     'ratio': abs(cp) / mass.value if mass.value > 0 else np.nan})
    return pd.DataFrame(rows)


def slab_convergence(ladder):
    """First-order fit of log|est(eps) - est(eps/2)| against log eps."""
    diffs = np.abs(np.diff(ladder.estimates))
    eps = ladder.eps[:-1]
    keep = (diffs > 0) & ladder.usable[1:]
    table = pd.DataFrame({'eps': eps, 'difference': diffs, 'usable': keep})
    order = np.nan
    if keep.sum() >= 2:
        _, order, _, _ = fit_line(np.log(eps[keep]), np.log(diffs[keep]))
    return table, float(order)


# ===== INTEGRATION BY PARTS =====

def ibp_rhs_contributions(samples, xid, hid, r):
    g = samples['g'].to_numpy()
    term = samples[x_col(xid)].to_numpy() * samples[w_col(hid)].to_numpy() \
        - samples[dxh_col(xid, hid)].to_numpy()
    return np.where(g < r, term, 0.0)


def ibp_rhs(samples, xid, hid, r):
    """E[1_{g<r} (X W(h) - <DX, h>_H)]; returns (value, stderr)."""
    samples = as_samples(samples)
    value, se = mean_and_se(ibp_rhs_contributions(samples, xid, hid, r),
                            samples['batch'].to_numpy())
    return float(value), float(se)


def ibp_lhs_ladder(samples, xid, hid, r, ladder, side='above'):
    integrand = samples[x_col(xid)].to_numpy() * samples[dgh_col(hid)].to_numpy()
    return slab_ladder(samples, integrand, r, ladder, side)


def ibp_lhs(samples, xid, hid, r, ladder, side='above'):
    """Slab-extrapolated int_{g=r} X <Dg, h>_H dsigma_r; returns (value, stderr)."""
    samples = as_samples(samples)
    built = ibp_lhs_ladder(samples, xid, hid, r, ladder, side)
    return built.extrapolated, built.extrapolated_se


def ibp_report(samples, suite, levels, ladder, side='above', suite_id='default'):
    """lhs, rhs and paired diff = lhs + rhs per (X, h, r) cell and per rung."""
    samples = as_samples(samples)
    batch = samples['batch'].to_numpy()
    prov = provenance(samples)
    rows = []
    for xid, hid in suite:
        for r in levels:
            rhs_contrib = ibp_rhs_contributions(samples, xid, hid, r)
            rhs, rhs_se = mean_and_se(rhs_contrib, batch)
            try:
                built = ibp_lhs_ladder(samples, xid, hid, r, ladder, side)
            except EmptySlab:
                rows.append({'suite': suite_id, 'X': xid, 'h': hid, 'r': r, 'eps': 'extrap',
                             'lhs': np.nan, 'rhs': rhs, 'diff': np.nan, 'stderr': np.nan,
                             'z': np.nan, 'passed': False, **prov})
                continue
            for eps, est, se, count in zip(built.eps, built.estimates, built.stderrs,
                                            built.counts):
                rows.append({'suite': suite_id, 'X': xid, 'h': hid, 'r': r, 'eps': f'{eps:.6g}',
                             'lhs': est, 'rhs': rhs, 'diff': est + rhs,
                             'stderr': np.hypot(se, rhs_se), 'z': np.nan, 'passed': None,
                             **prov})
            diff, se = mean_and_se(built.contrib + rhs_contrib, batch)
            trivial = diff == 0.0 and se == 0.0
            rows.append({'suite': suite_id, 'X': xid, 'h': hid, 'r': r, 'eps': 'extrap',
                         'lhs': built.extrapolated, 'rhs': rhs, 'diff': diff, 'stderr': se,
                         'z': z_score(diff, 0.0, se),
                         'passed': bool(trivial or abs(diff) <= 3.0 * se), **prov})
    return pd.DataFrame(rows)


def ibp_summary(report):
    """Pass fraction over extrapolated cells and the divergence-row verdict."""
    cells = report[report['eps'] == 'extrap']
    if cells.empty:
        return {'cells': 0, 'passed': 0, 'fraction': 1.0, 'divergence_row_passed': True}
    passed = cells['passed'].astype(bool)
    divergence = passed[cells['X'] == 'one']
    return {'cells': int(len(cells)), 'passed': int(passed.sum()), 'fraction': float(passed.mean()),
            'divergence_row_passed': bool(divergence.all()) if len(divergence) else True}
