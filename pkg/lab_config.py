"""
Wiener Lab Configuration
RunConfig, its defaults and the JSON key-value config files.

A config file is a JSON object with any subset of the DEFAULT_CONFIG keys;
missing keys fall back to the defaults and CLI flags override both.
Everything is validated before any computation starts.
"""

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from lab_errors import ConfigError
from malliavin_core import OUTER_MAPS, direction_field, functional_from_spec
from path_engine import RngSpec, TimeGrid, sample_ensemble

PROJECT_DIR = Path(__file__).parent
CONFIG_DIR = PROJECT_DIR / 'configs'

DEFAULT_CONFIG = {
    'dim': 3,
    'steps': 512,
    'paths': 1_000_000,
    'seed': 20240611,
    'batch_size': 2000,
    'workers': 1,
    'r_grid': {'points': 32, 'low_quantile': 0.02, 'high_quantile': 0.98},
    'eps_ladder': {'start': 0.2, 'rungs': 6},
    'bandwidth': 'silverman',
    'lambdas': [0.5, 1.0, 2.0],
    'potentials': ['zero', 'cos:0.25', 'cos:0.5', 'bump:0.5'],
    'functionals': [
        {'id': 'w_e1', 'outer': 'identity', 'directions': ['e1']},
        {'id': 'tanh_ramp_e1', 'outer': 'tanh', 'directions': ['ramp_e1']},
        {'id': 'cos_e2', 'outer': 'cos', 'directions': ['e2']},
        {'id': 'w_e1_sin_e2', 'outer': 'product', 'directions': ['e1', 'sin_e2']},
    ],
    'ibp_suite': {
        'functionals': ['one', 'w_e1', 'tanh_ramp_e1'],
        'directions': ['e1', 'ramp_e2', 'sin_e3'],
        'levels': [0.4, 0.7, 1.0],
    },
    'stehfest_order': 12,
    'moment_exponents': [0.0, 1.0, 2.5],
    'eta_ladder': [0.2, 0.15, 0.1, 0.07],
    'refinement_paths': 100,
    'plots': True,
    'out_dir': 'results',
}


@dataclass(frozen=True)
class RunConfig:
    dim: int
    steps: int
    paths: int
    seed: int
    batch_size: int
    workers: int
    r_grid: object
    eps_ladder: object
    bandwidth: object
    lambdas: list
    potentials: list
    functionals: list
    ibp_suite: dict
    stehfest_order: int
    moment_exponents: list
    eta_ladder: list
    refinement_paths: int
    plots: bool
    out_dir: str

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = copy.deepcopy(DEFAULT_CONFIG)
        merged.update(copy.deepcopy(data))
        config = cls(**merged)
        validate(config)
        return config

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        """Canonical one-line JSON (sorted keys) used as CSV provenance header."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))

    def with_overrides(self, **overrides):
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)

    # ----- builders -----

    def grid(self):
        return TimeGrid(self.steps)

    def rng(self):
        return RngSpec(self.seed)

    def ensemble(self):
        return sample_ensemble(self.dim, self.grid(), self.paths, self.rng(), self.batch_size)

    def ladder(self):
        spec = self.eps_ladder
        if isinstance(spec, dict):
            return spec['start'] * 0.5 ** np.arange(int(spec['rungs']))
        return np.asarray(spec, dtype=float)

    def levels(self, g_values):
        spec = self.r_grid
        if isinstance(spec, dict):
            lo, hi = np.quantile(g_values, [spec['low_quantile'], spec['high_quantile']])
            return np.linspace(max(lo, 1e-12), hi, int(spec['points']))
        return np.asarray(spec, dtype=float)

    def build_functionals(self, grid=None):
        grid = grid or self.grid()
        return {spec['id']: functional_from_spec(spec, grid, self.dim) for spec in self.functionals}

    def build_directions(self, grid=None):
        grid = grid or self.grid()
        return {hid: direction_field(hid, grid, self.dim) for hid in self.ibp_suite['directions']}


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def _is_int(value):
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def validate(config):
    """Raise ConfigError on the first invalid value."""
    for key in ('dim', 'steps', 'paths', 'batch_size', 'workers', 'refinement_paths'):
        _require(_is_int(getattr(config, key)), f"{key} must be an integer")
    _require(config.dim >= 1, f"dim must be >= 1, got {config.dim}")
    _require(config.steps >= 2, f"steps must be >= 2, got {config.steps}")
    _require(config.paths >= 1, f"paths must be >= 1, got {config.paths}")
    _require(config.batch_size >= 1, "batch_size must be >= 1")
    _require(config.workers >= 1, "workers must be >= 1")
    _require(config.refinement_paths >= 1, "refinement_paths must be >= 1")
    _require(_is_int(config.seed) and 0 <= config.seed < 2 ** 64, "seed must be a 64-bit integer")

    r_grid = config.r_grid
    if isinstance(r_grid, dict):
        _require(set(r_grid) == {'points', 'low_quantile', 'high_quantile'},
                 "r_grid needs points, low_quantile, high_quantile")
        _require(int(r_grid['points']) >= 2, "r_grid points must be >= 2")
        _require(0.0 <= r_grid['low_quantile'] < r_grid['high_quantile'] <= 1.0,
                 "r_grid quantiles must satisfy 0 <= low < high <= 1")
    else:
        values = np.asarray(r_grid, dtype=float)
        _require(values.ndim == 1 and len(values) >= 1 and (values > 0).all(),
                 "explicit r_grid must be positive levels")
        _require(np.all(np.diff(values) > 0), "explicit r_grid must be strictly increasing")

    ladder = config.eps_ladder
    if isinstance(ladder, dict):
        _require(set(ladder) == {'start', 'rungs'}, "eps_ladder needs start and rungs")
        _require(ladder['start'] > 0 and int(ladder['rungs']) >= 1,
                 "eps_ladder start must be > 0 and rungs >= 1")
    else:
        values = np.asarray(ladder, dtype=float)
        _require(values.ndim == 1 and (values > 0).all() and np.all(np.diff(values) < 0),
                 "explicit eps_ladder must be positive and strictly decreasing")

    if config.bandwidth != 'silverman':
        _require(isinstance(config.bandwidth, (int, float)) and config.bandwidth > 0,
                 "bandwidth must be 'silverman' or a positive number")
    _require(all(lam >= 0 for lam in config.lambdas), "lambdas must be >= 0")
    _require(_is_int(config.stehfest_order) and config.stehfest_order >= 2
             and config.stehfest_order % 2 == 0, "stehfest_order must be an even integer >= 2")
    _require(all(p >= 0 for p in config.moment_exponents), "moment exponents must be >= 0")
    eta = np.asarray(config.eta_ladder, dtype=float)
    _require(len(eta) >= 1 and ((eta > 0) & (eta < 1)).all()
             and (len(eta) == 1 or np.all(np.diff(eta) < 0)),
             "eta_ladder must be decreasing inside (0, 1)")

    from gradient_sde import potential_from_name
    for name in config.potentials:
        potential_from_name(name, config.dim)

    ids = set()
    for spec in config.functionals:
        _require(isinstance(spec, dict) and 'id' in spec and 'outer' in spec,
                 "each functional needs an id and an outer map")
        _require(spec['outer'] in OUTER_MAPS, f"unknown outer map '{spec['outer']}'")
        _require(spec['id'] != 'one', "functional id 'one' is reserved for X = 1")
        try:
            functional_from_spec(spec, TimeGrid(2), config.dim)
        except ValueError as exc:
            raise ConfigError(f"functional '{spec['id']}': {exc}") from exc
        ids.add(spec['id'])

    suite = config.ibp_suite
    _require(set(suite) == {'functionals', 'directions', 'levels'},
             "ibp_suite needs functionals, directions, levels")
    for xid in suite['functionals']:
        _require(xid == 'one' or xid in ids, f"ibp_suite functional '{xid}' is not defined")
    for hid in suite['directions']:
        try:
            direction_field(hid, TimeGrid(2), config.dim)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    _require(all(r > 0 for r in suite['levels']), "ibp_suite levels must be > 0")


def load_config(file=None):
    """Load a RunConfig from a JSON file (defaults when no file is given)."""
    if file is None:
        return RunConfig.from_dict({})
    file = Path(file)
    if not file.exists():
        raise ConfigError(f"config file not found: {file}")
    try:
        with open(file, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{file}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{file}: config must be a JSON object")
    return RunConfig.from_dict(data)


def save_config(config, file):
    """Save a RunConfig as a JSON file."""
    with open(file, 'w') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
