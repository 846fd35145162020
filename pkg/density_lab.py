"""
Wiener Lab Density Routes
Estimates the density f1 of g and the derivatives f_X = F_X' by independent
routes (Gaussian KDE, the Malliavin weight delta(u/gamma) 1_{g>r}, Gaver-
Stehfest inversion of the closed-form Laplace transform), Nadaraya-Watson
conditional expectations E[X | g = r], and the gamma tail / inverse-moment
diagnostics.

Every Monte Carlo estimator reads the per-path sample table produced by
sample_pass.run_pass and reduces per-path contributions batch by batch.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import factorial

from lab_errors import InsufficientLocalSamples
from lab_stats import batched_stats, combined_se, fit_line, mean_and_se, paired_difference, z_score
from sample_pass import as_samples, delta_x_col, provenance, x_col

LN2 = np.log(2.0)
Z_VARIANCE = 2.0 / 15.0
MIN_EFFECTIVE_SAMPLES = 100


# ===== RESULT TYPES =====

@dataclass
class DensityCurve:
    """Estimates of a density (or F_X') on an r-grid with standard errors."""
    r: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)
    flags: list = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.estimate = np.asarray(self.estimate, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if self.flags is None:
            self.flags = [''] * len(self.r)
        if len(self.r) > 1 and not np.all(np.diff(self.r) > 0):
            raise ValueError("r-grid must be strictly increasing")
        if not np.isfinite(self.estimate).all():
            raise ValueError(f"{self.method}: non-finite estimates")
        if (self.stderr < 0).any():
            raise ValueError(f"{self.method}: negative standard errors")

    def at(self, r):
        """Estimate and SE at the grid point nearest to r."""
        i = int(np.argmin(np.abs(self.r - r)))
        return float(self.estimate[i]), float(self.stderr[i])

    def to_frame(self):
        prov = {k: self.meta.get(k) for k in ('n', 'N', 'M', 'seed')}
        return pd.DataFrame({
            'method': self.method,
            **prov,
            'r': self.r,
            'estimate': self.estimate,
            'stderr': self.stderr,
            'flags': self.flags,
        })


@dataclass
class MomentReport:
    """E[gamma^-p] with SE, plus the gamma tail table and its log-log slope."""
    exponent: float
    estimate: float
    stderr: float
    tail: pd.DataFrame = None
    slope: float = np.nan
    slope_se: float = np.nan
    flags: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def slope_band(self):
        return self.slope - 2.0 * self.slope_se, self.slope + 2.0 * self.slope_se


@dataclass
class LocalEstimate:
    value: float
    stderr: float
    bandwidth: float
    effective: float


# ===== GRIDS AND BANDWIDTHS =====

def silverman_bandwidth(values):
    """0.9 min(sd, IQR/1.34) M^(-1/5)."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("bandwidth needs at least two samples")
    sd = values.std(ddof=1)
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * values.size ** (-0.2)


def resolve_bandwidth(bandwidth, values):
    if bandwidth in (None, 'silverman'):
        return silverman_bandwidth(values)
    h = float(bandwidth)
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    return h


def default_r_grid(values, points=32, low_quantile=0.02, high_quantile=0.98):
    """points equally spaced levels between two quantiles of the sampled g."""
    lo, hi = np.quantile(np.asarray(values, dtype=float), [low_quantile, high_quantile])
    lo = max(lo, 1e-12)
    return np.linspace(lo, hi, int(points))


def integrate_curve(curve):
    """Trapezoid integral of a curve over its own r-grid."""
    return float(trapezoid(curve.estimate, curve.r))


def tail_mass(samples, r_grid, column='g'):
    """Empirical mass of g outside [r_0, r_last]."""
    g = samples[column].to_numpy()
    return float(np.mean((g < r_grid[0]) | (g > r_grid[-1])))


def kde_bias_allowance(curve, bandwidth):
    """Leading KDE bias 1/2 h^2 |f''| from finite differences of the curve."""
    if len(curve.r) < 3:
        return np.zeros_like(curve.estimate)
    second = np.gradient(np.gradient(curve.estimate, curve.r), curve.r)
    return 0.5 * bandwidth ** 2 * np.abs(second)


# ===== KERNEL ROUTES =====

def gaussian_kernel(r, g, h):
    z = (r - g) / h
    return np.exp(-0.5 * z * z) / (h * np.sqrt(2.0 * np.pi))


def _weighted_kernel_curve(samples, r_grid, h, weights, column, method, extra_meta=None):
    g = samples[column].to_numpy()
    if g.size == 0:
        raise ValueError("empty sample table")
    batch = samples['batch'].to_numpy()
    est, se = np.empty(len(r_grid)), np.empty(len(r_grid))
    for i, r in enumerate(r_grid):
        contrib = gaussian_kernel(r, g, h) * weights
        est[i], se[i] = mean_and_se(contrib, batch)
    meta = {**provenance(samples), 'bandwidth': h, **(extra_meta or {})}
    return DensityCurve(r_grid, est, se, method, meta)


def kde_density(samples, r_grid, bandwidth='silverman', column='g', weights=None):
    """Gaussian KDE of the g-samples (optionally weighted) with batch-merged SEs."""
    samples = as_samples(samples)
    g = samples[column].to_numpy()
    h = resolve_bandwidth(bandwidth, g)
    w = np.ones_like(g) if weights is None else np.asarray(weights, dtype=float)
    return _weighted_kernel_curve(samples, np.asarray(r_grid, dtype=float), h, w, column, 'kde')


def conditional_product(samples, x, r_grid, bandwidth='silverman', column='g'):
    """E[X | g=r] f1(r) as the kernel average of X (Nadaraya-Watson times KDE)."""
    samples = as_samples(samples)
    xv = _values(samples, x)
    h = resolve_bandwidth(bandwidth, samples[column].to_numpy())
    return _weighted_kernel_curve(samples, np.asarray(r_grid, dtype=float), h, xv, column,
                                  'conditional-product')


def _values(samples, x):
    if isinstance(x, str):
        if x in samples.columns:
            return samples[x].to_numpy()
        return samples[x_col(x)].to_numpy()
    return np.asarray(x, dtype=float)


def conditional_expectation(samples, x, r, bandwidth='silverman', column='g',
                            min_effective=MIN_EFFECTIVE_SAMPLES):
    """Nadaraya-Watson estimate of E[X | g = r] with a delta-method SE."""
    samples = as_samples(samples)
    g = samples[column].to_numpy()
    xv = _values(samples, x)
    h = resolve_bandwidth(bandwidth, g)
    k = gaussian_kernel(r, g, h)
    total = k.sum()
    effective = total ** 2 / (k ** 2).sum() if total > 0 else 0.0
    if effective < min_effective:
        raise InsufficientLocalSamples(
            f"only {effective:.1f} effective samples near r={r:.4g} (h={h:.3g})")
    value = (k * xv).sum() / total
    resid = k * (xv - value)
    stderr = float(np.sqrt((resid ** 2).sum()) / total)
    return LocalEstimate(float(value), stderr, h, float(effective))


# ===== MALLIAVIN ROUTE =====

def _malliavin_weights(samples, column):
    w = samples[column].to_numpy()
    return np.where(samples['degenerate'].to_numpy(), 0.0, w)


def _indicator_curve(samples, r_grid, weight_column, method):
    g = samples['g'].to_numpy()
    batch = samples['batch'].to_numpy()
    w = _malliavin_weights(samples, weight_column)
    est, se = np.empty(len(r_grid)), np.empty(len(r_grid))
    for i, r in enumerate(r_grid):
        est[i], se[i] = mean_and_se(np.where(g > r, w, 0.0), batch)
    meta = {**provenance(samples),
            'degenerate_count': int(samples['degenerate'].sum()),
            'weight': weight_column}
    return DensityCurve(r_grid, est, se, method, meta)


def malliavin_density(samples, r_grid):
    """f1(r) = E[delta(u/gamma) 1_{g>r}]."""
    samples = as_samples(samples)
    return _indicator_curve(samples, np.asarray(r_grid, dtype=float), 'delta_u_over_gamma',
                            'malliavin')


def malliavin_density_X(samples, xid, r_grid):
    """f_X(r) = E[delta(X u/gamma) 1_{g>r}] for a functional present in the table."""
    samples = as_samples(samples)
    return _indicator_curve(samples, np.asarray(r_grid, dtype=float), delta_x_col(xid),
                            'malliavin')


def empirical_cdf(samples, r_grid):
    """P(g <= r) with binomial SEs via batches."""
    samples = as_samples(samples)
    g = samples['g'].to_numpy()
    batch = samples['batch'].to_numpy()
    est, se = zip(*(mean_and_se((g <= r).astype(float), batch) for r in r_grid))
    return DensityCurve(r_grid, est, se, 'empirical-cdf', provenance(samples))


def malliavin_cdf(samples, r_grid):
    """F1(r) = 1 - E[delta(u/gamma) (g - r)^+], the integrated Malliavin route."""
    samples = as_samples(samples)
    g = samples['g'].to_numpy()
    batch = samples['batch'].to_numpy()
    w = _malliavin_weights(samples, 'delta_u_over_gamma')
    est, se = np.empty(len(r_grid)), np.empty(len(r_grid))
    for i, r in enumerate(r_grid):
        mean, sem = mean_and_se(w * np.maximum(g - r, 0.0), batch)
        est[i], se[i] = 1.0 - mean, sem
    return DensityCurve(r_grid, est, se, 'malliavin-cdf', provenance(samples))


# ===== CROSS-ROUTE COMPARISON =====

def route_contributions(samples, route, r, bandwidth=None, xid='one'):
    """Per-path contributions whose mean is the route's estimate at r."""
    g = samples['g'].to_numpy()
    if route == 'kde':
        h = resolve_bandwidth(bandwidth, g)
        return gaussian_kernel(r, g, h) * _values(samples, xid)
    if route == 'malliavin':
        return np.where(g > r, _malliavin_weights(samples, delta_x_col(xid)), 0.0)
    raise ValueError(f"unknown route '{route}'")


def compare_routes(samples, r_values, route_a='kde', route_b='malliavin', bandwidth='silverman',
                   xid='one', allowance=None):
    """Paired per-path differences of two routes at selected levels."""
    samples = as_samples(samples)
    batch = samples['batch'].to_numpy()
    h = resolve_bandwidth(bandwidth, samples['g'].to_numpy())
    rows = []
    for i, r in enumerate(r_values):
        a = route_contributions(samples, route_a, r, h, xid)
        b = route_contributions(samples, route_b, r, h, xid)
        est_a, se_a = mean_and_se(a, batch)
        est_b, se_b = mean_and_se(b, batch)
        diff, se = paired_difference(a, b, batch)
        tol = 3.0 * se + (0.0 if allowance is None else float(allowance[i]))
        rows.append({'r': r, route_a: est_a, route_b: est_b, 'diff': diff, 'stderr': se,
                     'unpaired_se': combined_se(se_a, se_b), 'z': z_score(diff, 0.0, se),
                     'tolerance': tol, 'passed': abs(diff) <= tol})
    return pd.DataFrame(rows)


def central_levels(r_grid, count=5):
    """count levels from the middle of an r-grid."""
    r_grid = np.asarray(r_grid, dtype=float)
    idx = np.linspace(len(r_grid) // 4, 3 * len(r_grid) // 4, count).round().astype(int)
    return r_grid[np.unique(idx)]


# ===== LAPLACE ROUTE =====

def log_cosh(x):
    x = np.abs(np.asarray(x, dtype=float))
    return x + np.log1p(np.exp(-2.0 * x)) - LN2


def laplace_oracle(lam, n):
    """E[exp(-lambda g)] = (cosh sqrt(lambda))^(-n/2)."""
    lam = np.asarray(lam, dtype=float)
    return np.exp(-0.5 * n * log_cosh(np.sqrt(lam)))


def laplace_mc(samples, lam, column='g'):
    """Monte Carlo mean of exp(-lambda g) and its SE."""
    samples = as_samples(samples)
    contrib = np.exp(-float(lam) * samples[column].to_numpy())
    mean, se = mean_and_se(contrib, samples['batch'].to_numpy())
    return float(mean), float(se)


def laplace_oracle_check(samples, lambdas, n, allowance=2e-3):
    """Oracle vs MC table; run it on an independent coarse ensemble before trusting the oracle."""
    rows = []
    for lam in lambdas:
        mc, se = laplace_mc(samples, lam)
        oracle = float(laplace_oracle(lam, n))
        rows.append({'lambda': lam, 'mc': mc, 'stderr': se, 'oracle': oracle,
                     'z': z_score(mc, oracle, se),
                     'passed': abs(mc - oracle) <= 3.0 * se + allowance})
    return pd.DataFrame(rows)


def stehfest_coefficients(order):
    """Gaver-Stehfest weights V_1..V_order (order even)."""
    if order % 2:
        raise ValueError(f"Stehfest order must be even, got {order}")
    half = order // 2
    coeff = np.zeros(order)
    for k in range(1, order + 1):
        total = 0.0
        for j in range((k + 1) // 2, min(k, half) + 1):
            total += (j ** half * factorial(2 * j, exact=True)
                      / (factorial(half - j, exact=True) * factorial(j, exact=True)
                         * factorial(j - 1, exact=True) * factorial(k - j, exact=True)
                         * factorial(2 * j - k, exact=True)))
        coeff[k - 1] = (-1) ** (k + half) * total
    return coeff


def _stehfest(transform, r, order):
    coeff = stehfest_coefficients(order)
    k = np.arange(1, order + 1)
    r = np.asarray(r, dtype=float)[:, None]
    return (LN2 / r[:, 0]) * (coeff * transform(k * LN2 / r)).sum(axis=1)


def invert_laplace(n, r_grid, order=12, tolerance=0.01):
    """f1 on r-grid by Gaver-Stehfest inversion of the oracle transform."""
    r_grid = np.asarray(r_grid, dtype=float)
    if (r_grid <= 0).any():
        raise ValueError("Laplace inversion needs r > 0")

    def transform(lam):
        return laplace_oracle(lam, n)

    values = _stehfest(transform, r_grid, order)
    flags = []
    scale = np.abs(values).max()
    neighbours = [_stehfest(transform, r_grid, o) for o in (order - 2, order + 2) if o >= 2]
    for i in range(len(r_grid)):
        spread = max(abs(v[i] - values[i]) for v in neighbours)
        flags.append('ill-conditioned' if spread > tolerance * max(abs(values[i]), 1e-3 * scale)
                     else '')
    meta = {'n': n, 'N': None, 'M': None, 'seed': None, 'stehfest_order': order}
    return DensityCurve(r_grid, values, np.zeros_like(values), 'laplace-inversion', meta, flags)


# ===== GAMMA DIAGNOSTICS =====

def inv_gamma_moments(samples, p, heavy_tail_share=0.5):
    """E[gamma^-p] with SE, top-1% share and batch stability diagnostics."""
    if p < 0:
        raise ValueError(f"exponent must be >= 0, got {p}")
    samples = as_samples(samples)
    ok = ~samples['degenerate'].to_numpy()
    gamma = samples['gamma'].to_numpy()[ok]
    batch = samples['batch'].to_numpy()[ok]
    contrib = np.power(gamma, -float(p))
    stats_all = batched_stats(contrib, batch)

    flags = []
    top = np.sort(contrib)[::-1][:max(1, contrib.size // 100)]
    share = float(top.sum() / contrib.sum()) if contrib.sum() > 0 else 0.0
    if share > heavy_tail_share:
        flags.append('heavy-tail')
    batch_means = pd.Series(contrib).groupby(batch).mean()
    spread = float(batch_means.std(ddof=1) / batch_means.mean()) if len(batch_means) > 1 else 0.0
    return MomentReport(float(p), float(stats_all.mean), float(stats_all.sem()), flags=flags,
                        extras={'top1_share': share, 'max_contribution': float(contrib.max()),
                                'batch_mean_cv': spread, 'degenerate_count': int((~ok).sum())})


def chi2_tail_bound(eta, n, sigma2=Z_VARIANCE):
    """P(gamma < eta) <= P(chi2_n < eta^2 / sigma^2), since gamma >= |int D_s g ds|."""
    return stats.chi2.cdf(np.asarray(eta, dtype=float) ** 2 / sigma2, n)


def gamma_tail(samples, eta_ladder):
    """Empirical P(gamma < eta) on a ladder, fitted log-log slope, Var(Z_1)."""
    samples = as_samples(samples)
    eta = np.asarray(eta_ladder, dtype=float)
    if ((eta <= 0) | (eta >= 1)).any() or (len(eta) > 1 and not np.all(np.diff(eta) < 0)):
        raise ValueError("eta ladder must be decreasing inside (0, 1)")
    n = samples.attrs.get('n') or 1
    gamma = samples['gamma'].to_numpy()
    batch = samples['batch'].to_numpy()
    rows = []
    for e in eta:
        hits = (gamma < e).astype(float)
        prob, se = mean_and_se(hits, batch)
        rows.append({'eta': e, 'prob': prob, 'stderr': se, 'count': int(hits.sum()),
                     'chi2_bound': float(chi2_tail_bound(e, n)), 'zero_bin': hits.sum() == 0})
    tail = pd.DataFrame(rows)

    flags = ['zero-bin'] if tail['zero_bin'].any() else []
    usable = tail[~tail['zero_bin']]
    slope, slope_se = np.nan, np.nan
    if len(usable) >= 2:
        _, slope, _, slope_se = fit_line(np.log(usable['eta']), np.log(usable['prob']),
                                         weights=usable['count'].to_numpy(dtype=float))

    z = samples['z1'].to_numpy()
    zc = z - z.mean()
    var = float(zc.var(ddof=1))
    var_se = float(np.sqrt(max((zc ** 4).mean() - var ** 2, 0.0) / z.size))
    return MomentReport(0.0, 1.0, 0.0, tail=tail, slope=float(slope), slope_se=float(slope_se),
                        flags=flags, extras={'z1_variance': var, 'z1_variance_se': var_se,
                                             'z1_variance_reference': Z_VARIANCE})
