"""
Wiener Lab Malliavin Core
Per-path Malliavin objects of g(x) = 1/2 ||x||_H^2 on the Wiener space:
g, Dg, gamma, the unit field u, D gamma, D(1/gamma), W(h), h-tilde,
delta(u), delta(u/gamma), delta(X u/gamma), and cylindrical functionals
X = f(W(h_1), ..., W(h_d)) with their derivatives.

The *_batch kernels work on (m, N+1, n) arrays and cost O(nN) per path:
Dg by suffix trapezoid sums, D gamma and h-tilde by the prefix-sum split of
the kernel 1 - max(s, theta). The single-path functions wrap them.
"""

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from lab_errors import DegenerateGamma, NonFiniteValue
from path_engine import (
    GridFunctionH, TimeGrid, backward_ito_batch, forward_ito_batch, h_inner_batch,
    linear_test_path, quadrature,
)

TOL_U_REL = 1e-12
TOL_GAMMA = 1e-12


# ===== KERNELS =====

def suffix_trapezoid(values, grid):
    """Dg(t_j) = int_{t_j}^1 x(t) dt by trapezoid suffix sums; Dg(t_N) = 0."""
    rev = np.cumsum(values[..., ::-1, :], axis=-2)[..., ::-1, :]
    dg = grid.dt * (rev - 0.5 * values - 0.5 * values[..., -1:, :])
    dg[..., -1, :] = 0.0
    return dg


def split_kernel(values, grid):
    """theta -> int_0^1 v(s) (1 - max(s, theta)) ds at every node theta, in O(N)."""
    t = grid.nodes[:, None]
    a = grid.weights[:, None] * values
    prefix = np.cumsum(a, axis=-2)
    tail_terms = a * (1.0 - t)
    tail = tail_terms.sum(axis=-2, keepdims=True) - np.cumsum(tail_terms, axis=-2)
    return (1.0 - t) * prefix + tail


def unit_field_batch(dg, grid, tol_rel=TOL_U_REL):
    """u = Dg/|Dg| where |Dg| > tol_rel * max|Dg|, 0 elsewhere.

    Dg(t_N) = 0, so u(t_N) = 0 and the last node is always guarded. Also returns the
    guard mask and the radii rho_j = |Dg(t_j)|/(1 - t_j) used by the trace term
    (rho_N = inf).
    """
    abs_dg = np.sqrt((dg ** 2).sum(axis=-1))
    tol = tol_rel * abs_dg.max(axis=-1, keepdims=True)
    guard = abs_dg <= tol
    guard[..., -1] = True
    u = np.where(guard[..., None], 0.0, dg / np.where(guard, 1.0, abs_dg)[..., None])

    radius = np.full_like(abs_dg, np.inf)
    radius[..., :-1] = abs_dg[..., :-1] / (1.0 - grid.nodes[:-1])
    return u, abs_dg, guard, radius


def skorohod_trace_batch(radius, guard, grid, dim):
    """Delta t * sum_k tr d u(t_{k+1}) / d xi_k = Delta t * sum_{0<j<N} (n-1) / rho_j."""
    if dim == 1:
        return np.zeros(radius.shape[:-1])
    safe = np.where(guard[..., 1:], 1.0, radius[..., 1:])
    terms = np.where(guard[..., 1:], 0.0, 1.0 / safe)
    return grid.dt * (dim - 1) * terms.sum(axis=-1)


def malliavin_batch(values, increments, grid, tol_rel=TOL_U_REL, tol_gamma=TOL_GAMMA):
    """Every Malliavin object of g for a block of paths, as a dict of arrays."""
    dim = values.shape[-1]
    g = 0.5 * quadrature((values ** 2).sum(axis=-1))
    dg = suffix_trapezoid(values, grid)
    u, abs_dg, guard, radius = unit_field_batch(dg, grid, tol_rel)
    gamma = quadrature(abs_dg)
    dgamma = split_kernel(u, grid)

    u_dgamma = h_inner_batch(u, dgamma)
    backward = backward_ito_batch(u, increments)
    trace = skorohod_trace_batch(radius, guard, grid, dim)
    delta_u = backward - trace

    degenerate = gamma <= tol_gamma
    safe_gamma = np.where(degenerate, 1.0, gamma)
    delta_u_over_gamma = np.where(degenerate, np.nan,
                                  delta_u / safe_gamma + u_dgamma / safe_gamma ** 2)

    return {
        'g': g,
        'Dg': dg,
        'abs_Dg': abs_dg,
        'u': u,
        'guard': guard,
        'gamma': gamma,
        'Dgamma': dgamma,
        'u_dgamma': u_dgamma,
        'backward_sum': backward,
        'skorohod_trace': trace,
        'delta_u': delta_u,
        'delta_u_over_gamma': delta_u_over_gamma,
        'degenerate': degenerate,
        'identity_gap': np.abs(h_inner_batch(dg, u) - gamma),
        'max_abs_dgamma': np.sqrt((dgamma ** 2).sum(axis=-1)).max(axis=-1),
        'guard_fraction': guard.mean(axis=-1),
    }


def tilde_values(h_values, grid):
    """h-tilde(t) = int_0^1 (1 - max(t, r)) h(r) dr for a deterministic field."""
    return split_kernel(np.asarray(h_values, dtype=float), grid)


# ===== RECORDS =====

@dataclass
class MalliavinRecord:
    """Per-path bundle of the Malliavin objects of g."""
    g: float
    Dg: GridFunctionH
    gamma: float
    u: GridFunctionH
    Dgamma: GridFunctionH
    DinvGamma: GridFunctionH
    delta_u: float
    delta_u_over_gamma: float
    u_dgamma: float = 0.0
    backward_sum: float = 0.0
    guard_fraction: float = 0.0
    degenerate: bool = False
    extras: dict = field(default_factory=dict, repr=False)


def _single(path):
    return malliavin_batch(path.values[None], path.increments[None], path.grid)


def malliavin_record(path, tol_gamma=TOL_GAMMA):
    """Build the full record of one path; degenerate paths get DinvGamma=None and NaN deltas."""
    out = malliavin_batch(path.values[None], path.increments[None], path.grid,
                          tol_gamma=tol_gamma)
    grid = path.grid
    gamma_value = float(out['gamma'][0])
    degenerate = bool(out['degenerate'][0])
    dgamma = GridFunctionH(out['Dgamma'][0], grid)
    inv = None if degenerate else GridFunctionH(-out['Dgamma'][0] / gamma_value ** 2, grid)
    return MalliavinRecord(
        g=float(out['g'][0]),
        Dg=GridFunctionH(out['Dg'][0], grid),
        gamma=gamma_value,
        u=GridFunctionH(out['u'][0], grid),
        Dgamma=dgamma,
        DinvGamma=inv,
        delta_u=float(out['delta_u'][0]),
        delta_u_over_gamma=float(out['delta_u_over_gamma'][0]),
        u_dgamma=float(out['u_dgamma'][0]),
        backward_sum=float(out['backward_sum'][0]),
        guard_fraction=float(out['guard_fraction'][0]),
        degenerate=degenerate,
        extras={'identity_gap': float(out['identity_gap'][0]),
                'max_abs_dgamma': float(out['max_abs_dgamma'][0])},
    )


def eval_g(path):
    """g(x) = 1/2 int_0^1 |x(t)|^2 dt."""
    return float(0.5 * quadrature((path.values ** 2).sum(axis=-1)))


def malliavin_derivative_g(path):
    """D_s g = int_s^1 x(t) dt."""
    return GridFunctionH(suffix_trapezoid(path.values[None], path.grid)[0], path.grid)


def gamma(path):
    """gamma = int_0^1 |D_s g| ds (zero only on the zero path)."""
    return float(_single(path)['gamma'][0])


def unit_field_u(path):
    """u(s) = D_s g / |D_s g| with guarded nodes set to zero."""
    return GridFunctionH(_single(path)['u'][0], path.grid)


def d_gamma(path):
    """D_theta gamma = int_0^1 u(s)(1 - max(s, theta)) ds."""
    return GridFunctionH(_single(path)['Dgamma'][0], path.grid)


def d_inv_gamma(record, tol_gamma=TOL_GAMMA):
    """D(1/gamma) = -D gamma / gamma^2."""
    if record.gamma <= tol_gamma:
        raise DegenerateGamma(f"gamma={record.gamma:.3e} is below {tol_gamma:.0e}")
    return record.Dgamma.scaled(-1.0 / record.gamma ** 2)


def tilde_transform(h):
    """h-tilde, the field with <Dg, h>_H = W(h-tilde) pathwise."""
    return GridFunctionH(tilde_values(h.values, h.grid), h.grid)


def skorohod_u(path):
    """delta(u): backward sum of u minus the trace of its derivative along the increments."""
    return float(_single(path)['delta_u'][0])


def skorohod_u_over_gamma(record, tol_gamma=TOL_GAMMA):
    """delta(u/gamma) = delta(u)/gamma + <u, D gamma>_H / gamma^2."""
    if record.gamma <= tol_gamma:
        raise DegenerateGamma(f"gamma={record.gamma:.3e} is below {tol_gamma:.0e}")
    return record.delta_u / record.gamma + record.u_dgamma / record.gamma ** 2


def skorohod_X_u_over_gamma(X, record, path, tol_gamma=TOL_GAMMA):
    """delta(X u/gamma) = X delta(u/gamma) - <DX, u>_H / gamma."""
    base = skorohod_u_over_gamma(record, tol_gamma)
    value, grad = eval_cylindrical(X, path), grad_cylindrical(X, path)
    return value * base - grad.inner(record.u) / record.gamma


def linear_path_oracle(steps, n):
    """delta(u) and delta(u/gamma) on x(t) = t e1, Richardson-extrapolated as 2 f(2N) - f(N).

    On this path both values carry an O(1/N) Riemann-sum error and an O(1/N^2) remainder.
    Exact limits: delta(u) = 1 - 2(n-1) ln 2 and delta(u/gamma) = 3 delta(u) + 3.
    """
    coarse = malliavin_record(linear_test_path(TimeGrid(steps), n))
    fine = malliavin_record(linear_test_path(TimeGrid(2 * steps), n))
    return {key: 2.0 * getattr(fine, key) - getattr(coarse, key)
            for key in ('delta_u', 'delta_u_over_gamma')}


def records_to_frame(records):
    """Debug dump of records with documented columns."""
    return pd.DataFrame([{
        'g': r.g,
        'gamma': r.gamma,
        'delta_u': r.delta_u,
        'delta_u_over_gamma': r.delta_u_over_gamma,
        'u_dgamma': r.u_dgamma,
        'max_abs_dgamma': r.extras.get('max_abs_dgamma', np.nan),
        'identity_gap': r.extras.get('identity_gap', np.nan),
        'guard_fraction': r.guard_fraction,
        'degenerate': r.degenerate,
    } for r in records])


# ===== DIRECTION FIELDS =====

_DIRECTION = re.compile(r'^(?:(ramp|sin)_)?e(\d+)$')


def direction_field(name, grid, n):
    """Named deterministic fields: zero, e<k>, ramp_e<k> (t e_k), sin_e<k> (sin(pi t) e_k)."""
    values = np.zeros((grid.steps + 1, n))
    if name == 'zero':
        return GridFunctionH(values, grid)
    match = _DIRECTION.match(name)
    if not match:
        raise ValueError(f"unknown direction field '{name}'")
    shape, k = match.group(1), int(match.group(2))
    if not 1 <= k <= n:
        raise ValueError(f"direction '{name}' needs 1 <= k <= n={n}")
    t = grid.nodes
    profile = {None: np.ones_like(t), 'ramp': t, 'sin': np.sin(np.pi * t)}[shape]
    values[:, k - 1] = profile
    return GridFunctionH(values, grid)


# ===== CYLINDRICAL FUNCTIONALS =====

def _f_constant(y, value=1.0):
    return np.full(y.shape[0], float(value))


def _g_constant(y, value=1.0):
    return np.zeros_like(y)


def _f_identity(y):
    return y[:, 0].copy()


def _g_identity(y):
    grad = np.zeros_like(y)
    grad[:, 0] = 1.0
    return grad


def _f_square(y):
    return y[:, 0] ** 2


def _g_square(y):
    grad = np.zeros_like(y)
    grad[:, 0] = 2.0 * y[:, 0]
    return grad


def _f_cube(y):
    return y[:, 0] ** 3


def _g_cube(y):
    grad = np.zeros_like(y)
    grad[:, 0] = 3.0 * y[:, 0] ** 2
    return grad


def _f_tanh(y):
    return np.tanh(y[:, 0])


def _g_tanh(y):
    grad = np.zeros_like(y)
    grad[:, 0] = 1.0 / np.cosh(y[:, 0]) ** 2
    return grad


def _f_cos(y):
    return np.cos(y[:, 0])


def _g_cos(y):
    grad = np.zeros_like(y)
    grad[:, 0] = -np.sin(y[:, 0])
    return grad


def _f_product(y):
    return y[:, 0] * y[:, 1]


def _g_product(y):
    return np.column_stack([y[:, 1], y[:, 0]])


OUTER_MAPS = {
    'constant': (_f_constant, _g_constant, 0),
    'identity': (_f_identity, _g_identity, 1),
    'square': (_f_square, _g_square, 1),
    'cube': (_f_cube, _g_cube, 1),
    'tanh': (_f_tanh, _g_tanh, 1),
    'cos': (_f_cos, _g_cos, 1),
    'product': (_f_product, _g_product, 2),
}


@dataclass
class CylindricalFunctional:
    """X = f(W(h_1), ..., W(h_d)) with supplied gradient of f.

    `outer` names an entry of OUTER_MAPS (picklable, used by worker pools);
    `f`/`grad` may instead be given directly for in-process use.
    """
    name: str
    directions: list
    outer: str = None
    params: dict = field(default_factory=dict)
    f: object = None
    grad: object = None

    def __post_init__(self):
        if self.outer is not None:
            f, grad, arity = OUTER_MAPS[self.outer]
            if arity and len(self.directions) < arity:
                raise ValueError(f"outer map '{self.outer}' needs {arity} directions")
            self.f, self.grad = f, grad
        if self.f is None or self.grad is None:
            raise ValueError(f"functional '{self.name}' needs an outer map or f and grad")

    @classmethod
    def constant(cls, value=1.0, name='one'):
        return cls(name, [], outer='constant', params={'value': float(value)})

    @property
    def is_constant(self):
        return self.outer == 'constant' or not self.directions

    def evaluate_batch(self, increments):
        """(values (m,), gradients (m, d)) from the increments of a block of paths."""
        m = increments.shape[0]
        if self.directions:
            y = np.column_stack([forward_ito_batch(h.values, increments) for h in self.directions])
        else:
            y = np.zeros((m, 0))
        values = np.asarray(self.f(y, **self.params), dtype=float)
        grads = np.asarray(self.grad(y, **self.params), dtype=float).reshape(m, -1)
        if not (np.isfinite(values).all() and np.isfinite(grads).all()):
            raise NonFiniteValue(f"functional '{self.name}' produced non-finite values")
        return values, grads

    def gram_with(self, h):
        """Cov(W(h_k), W(h)) for each direction: the left-endpoint sum the increments realize.

        This is <h_k, h>_H up to O(dt) and makes E<DX, h> = E[X W(h)] exact on the grid.
        """
        h.grid.check_same(self.directions[0].grid)
        dt = h.grid.dt
        return np.array([dt * (hk.values[:-1] * h.values[:-1]).sum() for hk in self.directions])

    def inner_batch(self, grads, fields):
        """<DX, v>_H per path for per-path fields v of shape (m, N+1, n)."""
        if not self.directions:
            return np.zeros(grads.shape[0])
        proj = np.column_stack([h_inner_batch(hk.values[None], fields) for hk in self.directions])
        return (grads * proj).sum(axis=1)


def functional_from_spec(spec, grid, n):
    """Build a functional from a config entry {"id", "outer", "directions", "params"}."""
    directions = [direction_field(d, grid, n) for d in spec.get('directions', [])]
    return CylindricalFunctional(spec['id'], directions, outer=spec['outer'],
                                 params=dict(spec.get('params', {})))


def eval_cylindrical(X, path):
    """X(x)."""
    values, _ = X.evaluate_batch(path.increments[None])
    return float(values[0])


def grad_cylindrical(X, path):
    """DX = sum_k d_k f(W(h_1), ...) h_k."""
    _, grads = X.evaluate_batch(path.increments[None])
    field_values = np.zeros((path.grid.steps + 1, path.dim))
    for coef, h in zip(grads[0], X.directions):
        field_values = field_values + coef * h.values
    return GridFunctionH(field_values, path.grid)


def cylindrical_duality_terms(X, h, increments):
    """Per-path (<DX, h>_H, X W(h)); their means agree by Gaussian integration by parts."""
    values, grads = X.evaluate_batch(increments)
    if X.directions:
        dx_h = grads @ X.gram_with(h)
    else:
        dx_h = np.zeros(increments.shape[0])
    return dx_h, values * forward_ito_batch(h.values, increments)
