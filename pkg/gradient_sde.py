"""
Wiener Lab Gradient SDE
Euler-Maruyama solutions of du = -grad V(u) dt + dB driven by the lab's
Brownian ensembles, the Girsanov density rho1 in its stochastic-integral and
integral-free forms, rho1(B)^-1, the density phi1 of g(u) by the
conditional-product route and by direct simulation, and theta_r slabs on
{g(u) = r}.

Potentials are named 'zero', 'cos:a' (a sum cos x_i) and 'bump:a'
(a / (1 + |x|^2)); all are C^3_b with closed-form bound constants.
"""

from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd

from density_lab import MIN_EFFECTIVE_SAMPLES, gaussian_kernel, kde_density
from lab_errors import ConfigError, InsufficientLocalSamples, NonFiniteValue
from lab_stats import fit_line, mean_and_se, paired_difference, z_score
from path_engine import coarsen, quadrature
from sample_pass import as_samples, potential_cols
from surface_lab import surface_integral


# ===== POTENTIALS =====

def _zero_v(x):
    return np.zeros(x.shape[:-1])


def _zero_grad(x):
    return np.zeros_like(x)


def _cos_v(x, a):
    return a * np.cos(x).sum(axis=-1)


def _cos_grad(x, a):
    return -a * np.sin(x)


def _cos_lap(x, a):
    return -a * np.cos(x).sum(axis=-1)


def _bump_v(x, a):
    return a / (1.0 + (x ** 2).sum(axis=-1))


def _bump_grad(x, a):
    q = 1.0 + (x ** 2).sum(axis=-1, keepdims=True)
    return -2.0 * a * x / q ** 2


def _bump_lap(x, a):
    s2 = (x ** 2).sum(axis=-1)
    q = 1.0 + s2
    n = x.shape[-1]
    return -2.0 * a * n / q ** 2 + 8.0 * a * s2 / q ** 3


@dataclass
class PotentialSpec:
    """V with its gradient, Laplacian and sup-norm bound constants.

    bounds keys: V, grad, hess, lap, grad_lap (sup |V|, |grad V|, ||hess V||, |tr hess V|,
    |grad tr hess V|).
    """
    name: str
    V: object
    grad: object
    laplacian: object
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ('V', 'grad', 'hess', 'lap', 'grad_lap'):
            value = self.bounds.get(key)
            if value is None or not np.isfinite(value):
                raise ConfigError(f"potential '{self.name}' needs a finite bound '{key}'")

    @property
    def is_zero(self):
        return self.name == 'zero'

    def log_rho_bounds(self):
        """Term-wise bounds of the integral-free log rho1."""
        b = self.bounds
        return (-(2.0 * b['V'] + 0.5 * b['lap']),
                2.0 * b['V'] + 0.5 * b['grad'] ** 2 + 0.5 * b['lap'])

    def lipschitz_constant(self):
        """Sup-norm Lipschitz constant of log rho1(B)^-1 in the path."""
        b = self.bounds
        return b['grad'] + b['grad'] * b['hess'] + 0.5 * b['grad_lap']

    def batch_features(self, values, increments, grid):
        """g(u), log rho1 in both forms and log rho1(B)^-1 for a block of driving paths."""
        u = euler_batch(self, values, increments, grid)
        return {
            'gu': 0.5 * quadrature((u ** 2).sum(axis=-1)),
            'log_rho_stoch': log_rho_stochastic_batch(self, u, increments, grid),
            'log_rho_repr': log_rho_functional_batch(self, u),
            'log_inv_rho_B': -log_rho_functional_batch(self, values),
        }


def potential_from_name(spec, dim):
    """'zero', 'cos:a' or 'bump:a' with closed-form bounds for dimension dim."""
    name, _, param = spec.partition(':')
    if name == 'zero':
        return PotentialSpec('zero', _zero_v, _zero_grad, _zero_v,
                             {'V': 0.0, 'grad': 0.0, 'hess': 0.0, 'lap': 0.0, 'grad_lap': 0.0})
    try:
        a = float(param) if param else 0.5
    except ValueError:
        raise ConfigError(f"bad potential parameter in '{spec}'")
    if name == 'cos':
        return PotentialSpec(spec, partial(_cos_v, a=a), partial(_cos_grad, a=a),
                             partial(_cos_lap, a=a),
                             {'V': dim * abs(a), 'grad': abs(a) * np.sqrt(dim), 'hess': abs(a),
                              'lap': dim * abs(a), 'grad_lap': abs(a) * np.sqrt(dim)})
    if name == 'bump':
        return PotentialSpec(spec, partial(_bump_v, a=a), partial(_bump_grad, a=a),
                             partial(_bump_lap, a=a),
                             {'V': abs(a), 'grad': 9.0 * abs(a) / (8.0 * np.sqrt(3.0)),
                              'hess': 2.0 * abs(a), 'lap': 2.0 * dim * abs(a),
                              'grad_lap': 2.0 * abs(a) * (0.37 * abs(8 - 2 * dim) + 1.33 * dim)})
    raise ConfigError(f"unknown potential '{spec}' (expected zero, cos:a or bump:a)")


def gradient_check(V, dim, points=64, eps=1e-5, seed=0):
    """Max central-difference error of grad V and of the Laplacian against V."""
    x = np.random.default_rng(seed).uniform(-3.0, 3.0, size=(points, dim))
    grad_err, lap_fd = 0.0, np.zeros(points)
    for i in range(dim):
        step = np.zeros(dim)
        step[i] = eps
        fd = (V.V(x + step) - V.V(x - step)) / (2.0 * eps)
        grad_err = max(grad_err, float(np.abs(fd - V.grad(x)[:, i]).max()))
        lap_fd += (V.V(x + step) - 2.0 * V.V(x) + V.V(x - step)) / eps ** 2
    return grad_err, float(np.abs(lap_fd - V.laplacian(x)).max())


# ===== SDE AND GIRSANOV KERNELS =====

def euler_batch(V, values, increments, grid):
    """u(t_{k+1}) = u(t_k) - grad V(u(t_k)) dt + dB_k from u(0) = B(0).

    V = 0 returns a copy of the driving values, so g(u) = g(B) bit for bit.
    """
    u = np.array(values, dtype=float, copy=True)
    if V.is_zero:
        return u
    for k in range(grid.steps):
        u[..., k + 1, :] = u[..., k, :] - V.grad(u[..., k, :]) * grid.dt + increments[..., k, :]
    if not np.isfinite(u).all():
        raise NonFiniteValue(f"Euler scheme for '{V.name}' left the finite range")
    return u


def log_rho_stochastic_batch(V, u, increments, grid):
    """sum <grad V(u_k), dB_k> - 1/2 sum |grad V(u_k)|^2 dt (left endpoints)."""
    grad = V.grad(u[..., :-1, :])
    ito = np.einsum('...kd,...kd->...', grad, increments)
    return ito - 0.5 * grid.dt * (grad ** 2).sum(axis=(-1, -2))


def log_rho_functional_batch(V, x):
    """V(x(1)) - V(x(0)) + 1/2 int |grad V(x)|^2 - 1/2 int tr hess V(x)."""
    grad = V.grad(x)
    return (V.V(x[..., -1, :]) - V.V(x[..., 0, :])
            + 0.5 * quadrature((grad ** 2).sum(axis=-1))
            - 0.5 * quadrature(V.laplacian(x)))


# ===== PER-PATH API =====

@dataclass
class SdePath:
    """Euler-Maruyama solution on the driving path's grid."""
    values: np.ndarray
    driver: object
    potential: PotentialSpec
    scheme: str = 'euler-maruyama'


@dataclass
class GirsanovRecord:
    rho1_stochastic: float
    rho1_representation: float
    inv_rho1_of_B: float
    g_of_u: float


def euler_maruyama(V, path):
    """Solve the gradient SDE driven by one Brownian path."""
    return SdePath(euler_batch(V, path.values[None], path.increments[None], path.grid)[0], path, V)


def rho1_stochastic(u, path=None):
    """exp(int <grad V(u), dB> - 1/2 int |grad V(u)|^2 dt) with the forward Ito sum."""
    path = path or u.driver
    log_rho = log_rho_stochastic_batch(u.potential, u.values[None], path.increments[None],
                                       path.grid)
    return float(np.exp(log_rho[0]))


def rho1_representation(u):
    """exp(V(u(1)) - V(u(0)) + 1/2 int |grad V(u)|^2 - 1/2 int tr hess V(u))."""
    return float(np.exp(log_rho_functional_batch(u.potential, u.values[None])[0]))


def inv_rho1_of_B(path, V):
    """rho1(B)^-1: the reciprocal of the integral-free functional evaluated on B."""
    return float(np.exp(-log_rho_functional_batch(V, path.values[None])[0]))


def girsanov_record(V, path):
    u = euler_maruyama(V, path)
    return GirsanovRecord(rho1_stochastic(u, path), rho1_representation(u),
                          inv_rho1_of_B(path, V),
                          float(0.5 * quadrature((u.values ** 2).sum(axis=-1))))


# ===== DENSITIES AND SLABS =====

def phi1_density(samples, vid, r_grid, bandwidth='silverman', strict=False):
    """phi1(r) = E[rho1(B)^-1 | g(B) = r] f1(r), as the kernel average of rho1(B)^-1."""
    samples = as_samples(samples)
    inv_rho = np.exp(samples[potential_cols(vid)['log_inv_rho_B']].to_numpy())
    curve = kde_density(samples, r_grid, bandwidth, weights=inv_rho)
    curve.method = 'conditional-product'
    curve.meta['potential'] = vid

    g = samples['g'].to_numpy()
    h = curve.meta['bandwidth']
    for i, r in enumerate(curve.r):
        k = gaussian_kernel(r, g, h)
        effective = k.sum() ** 2 / (k ** 2).sum() if k.sum() > 0 else 0.0
        if effective < MIN_EFFECTIVE_SAMPLES:
            if strict:
                raise InsufficientLocalSamples(
                    f"only {effective:.1f} effective samples near r={r:.4g}")
            curve.flags[i] = 'insufficient-local-samples'
    return curve


def empirical_density_gu(samples, vid, r_grid, bandwidth='silverman'):
    """KDE of g(u) simulated directly under mu."""
    samples = as_samples(samples)
    curve = kde_density(samples, r_grid, bandwidth, column=potential_cols(vid)['gu'])
    curve.method = 'empirical-sde'
    curve.meta['potential'] = vid
    return curve


def theta_slab(samples, vid, x, r, ladder, bandwidth='silverman', side='above'):
    """Slab estimate of the surface measure on {g(u) = r}."""
    samples = as_samples(samples)
    return surface_integral(samples, x, r, ladder, bandwidth, side,
                            column=potential_cols(vid)['gu'], name=x if isinstance(x, str) else 'one')


# ===== CHECKS =====

def normalisation_check(samples, vid):
    """E_mu[rho1(u)] = 1 and E_mu[rho1(B)^-1] = 1."""
    samples = as_samples(samples)
    cols = potential_cols(vid)
    batch = samples['batch'].to_numpy()
    rows = []
    for label, col in (('rho1(u)', cols['log_rho_stoch']), ('1/rho1(B)', cols['log_inv_rho_B'])):
        mean, se = mean_and_se(np.exp(samples[col].to_numpy()), batch)
        rows.append({'potential': vid, 'quantity': label, 'mean': mean, 'stderr': se,
                     'z': z_score(mean, 1.0, se), 'passed': abs(mean - 1.0) <= 3.0 * se + 1e-12})
    return pd.DataFrame(rows)


def bounds_check(samples, V):
    """Fraction of paths whose rho1 (integral-free) and rho1(B)^-1 sit inside the closed-form bounds."""
    cols = potential_cols(V.name)
    lo, hi = V.log_rho_bounds()
    repr_ok = samples[cols['log_rho_repr']].between(lo - 1e-12, hi + 1e-12)
    inv_ok = (-samples[cols['log_inv_rho_B']]).between(lo - 1e-12, hi + 1e-12)
    return {'potential': V.name, 'log_lower': lo, 'log_upper': hi,
            'repr_inside': float(repr_ok.mean()), 'inv_inside': float(inv_ok.mean())}


def change_of_measure_check(samples, vid, r_values, lambdas=(0.5, 1.0, 2.0)):
    """E[1_{g(u)<=r}] = E[1_{g(B)<=r} rho1(B)^-1] and the Laplace forms of the same identity."""
    samples = as_samples(samples)
    cols = potential_cols(vid)
    batch = samples['batch'].to_numpy()
    g = samples['g'].to_numpy()
    gu = samples[cols['gu']].to_numpy()
    inv_rho = np.exp(samples[cols['log_inv_rho_B']].to_numpy())
    rho_u = np.exp(samples[cols['log_rho_stoch']].to_numpy())

    pairs = [(f'P(g(u)<=r) r={r:.4g}', (gu <= r).astype(float), (g <= r) * inv_rho)
             for r in r_values]
    pairs += [(f'E exp(-lambda g(u)) lambda={lam:g}', np.exp(-lam * gu), np.exp(-lam * g) * inv_rho)
              for lam in lambdas]
    pairs += [(f'E rho1(u) exp(-lambda g(u)) lambda={lam:g}', rho_u * np.exp(-lam * gu),
               np.exp(-lam * g)) for lam in lambdas]
    rows = []
    for label, a, b in pairs:
        lhs, _ = mean_and_se(a, batch)
        rhs, _ = mean_and_se(b, batch)
        diff, se = paired_difference(a, b, batch)
        rows.append({'potential': vid, 'identity': label, 'lhs': lhs, 'rhs': rhs, 'diff': diff,
                     'stderr': se, 'z': z_score(diff, 0.0, se),
                     'passed': abs(diff) <= 3.0 * se + 1e-12})
    return pd.DataFrame(rows)


def _first_batch(ensemble, paths):
    pb = ensemble.batch(0)
    if pb.size > paths:
        pb.values, pb.increments = pb.values[:paths], pb.increments[:paths]
    return pb


def euler_strong_convergence(V, ensemble, paths=100, factors=(8, 4, 2)):
    """Mean sup-norm gap between u on N/f and u on the fine grid, on coupled paths."""
    fine = _first_batch(ensemble, paths)
    u_fine = euler_batch(V, fine.values, fine.increments, fine.grid)
    rows = []
    for f in factors:
        coarse = coarsen(fine, f)
        u_coarse = euler_batch(V, coarse.values, coarse.increments, coarse.grid)
        gap = np.abs(u_coarse - u_fine[:, ::f]).max(axis=(1, 2))
        rows.append({'steps': coarse.grid.steps, 'dt': coarse.grid.dt,
                     'mean_sup_error': float(gap.mean())})
    table = pd.DataFrame(rows)
    order = np.nan
    usable = table[table['mean_sup_error'] > 0]
    if len(usable) >= 2:
        _, order, _, _ = fit_line(np.log(usable['dt']), np.log(usable['mean_sup_error']))
    return table, float(order)


def girsanov_refinement(V, ensemble, paths=100, factors=(4, 2, 1)):
    """Median |log rho1 stochastic - log rho1 integral-free| on coarsened copies of the same paths."""
    fine = _first_batch(ensemble, paths)
    rows = []
    for f in factors:
        pb = coarsen(fine, f) if f > 1 else fine
        u = euler_batch(V, pb.values, pb.increments, pb.grid)
        gap = np.abs(log_rho_stochastic_batch(V, u, pb.increments, pb.grid)
                     - log_rho_functional_batch(V, u))
        rows.append({'steps': pb.grid.steps, 'dt': pb.grid.dt,
                     'median_log_gap': float(np.median(gap))})
    table = pd.DataFrame(rows)
    order = np.nan
    usable = table[table['median_log_gap'] > 0]
    if len(usable) >= 2:
        _, order, _, _ = fit_line(np.log(usable['dt']), np.log(usable['median_log_gap']))
    return table, float(order)


def lipschitz_probe(V, ensemble, paths=100, delta=1e-3, direction=0):
    """Worst ratio |change of log rho1(B)^-1| / (L delta) under a sup-norm-delta ramp perturbation."""
    pb = _first_batch(ensemble, paths)
    ramp = np.zeros_like(pb.values[0])
    ramp[:, direction] = delta * pb.grid.nodes
    base = log_rho_functional_batch(V, pb.values)
    moved = log_rho_functional_batch(V, pb.values + ramp)
    bound = V.lipschitz_constant() * delta
    change = np.abs(moved - base)
    return {'potential': V.name, 'delta': delta, 'max_change': float(change.max()),
            'bound': float(bound),
            'passed': bool((change <= bound * (1.0 + 1e-9) + 1e-15).all())}


def collapse_check(samples, vid='zero'):
    """V = 0 must reproduce the B-only quantities exactly on shared driving paths."""
    cols = potential_cols(vid)
    return {
        'gu_equals_g': bool((samples[cols['gu']].to_numpy() == samples['g'].to_numpy()).all()),
        'rho_stoch_is_one': bool((np.exp(samples[cols['log_rho_stoch']]) == 1.0).all()),
        'rho_repr_is_one': bool((np.exp(samples[cols['log_rho_repr']]) == 1.0).all()),
        'inv_rho_is_one': bool((np.exp(samples[cols['log_inv_rho_B']]) == 1.0).all()),
    }


def drift_reference(V, values, increments, grid):
    """u(t_k) - (B(t_k) - c t_k) for the frozen drift c = grad V(0); small where grad V is nearly flat."""
    c = V.grad(np.zeros(values.shape[-1]))
    u = euler_batch(V, values, increments, grid)
    return u - (values - grid.nodes[:, None] * c)


