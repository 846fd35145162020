"""
Wiener Lab Path Engine
Generates, stores and streams ensembles of discretized n-dimensional Brownian
paths, and provides the quadrature and Ito-sum primitives every other module
uses.

Stream rule: batch b of an ensemble with master seed s draws its increments
from numpy's counter-based Philox generator keyed by
SeedSequence(entropy=s, spawn_key=(b,)). The rule is a pure function of
(s, b), so any batch can be regenerated alone and worker scheduling never
changes a value.

Binary layout (little-endian): a 48-byte header
    magic 'WLAB' | version u4 | n u4 | N u4 | pad u4 | M u8 | seed u8 | batch_size u8 | pad u8
followed by M * (N+1) * n float64 node values in path-major order.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lab_errors import ConfigError, EnsembleFormatError, EnsembleShapeMismatch, GridMismatch
from lab_stats import RunningStats, merge_all

DEFAULT_BATCH_SIZE = 2000

MAGIC = b'WLAB'
FORMAT_VERSION = 1
HEADER_DTYPE = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('n', '<u4'),
    ('N', '<u4'),
    ('pad0', '<u4'),
    ('M', '<u8'),
    ('seed', '<u8'),
    ('batch_size', '<u8'),
    ('pad1', '<u8'),
])
PAYLOAD_DTYPE = np.dtype('<f8')


# ===== GRID AND RANDOMNESS =====

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k/N on [0, 1]."""
    steps: int

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ConfigError(f"grid needs at least one step, got {self.steps}")

    @property
    def dt(self):
        return 1.0 / self.steps

    @property
    def nodes(self):
        return np.arange(self.steps + 1) / self.steps

    @property
    def weights(self):
        """Trapezoid weights; they sum to one."""
        w = np.full(self.steps + 1, 1.0 / self.steps)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def check_same(self, other):
        if other.steps != self.steps:
            raise GridMismatch(f"grid with N={self.steps} used with grid N={other.steps}")


@dataclass(frozen=True)
class RngSpec:
    """Master seed plus the per-batch stream derivation rule."""
    master_seed: int

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigError(f"master seed must be a 64-bit unsigned integer, got {self.master_seed}")

    def seed_sequence(self, batch_index):
        return np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=(int(batch_index),))

    def sub_seed(self, batch_index):
        """128-bit sub-seed of a batch (what the Philox key is built from)."""
        words = self.seed_sequence(batch_index).generate_state(4, np.uint32)
        return sum(int(w) << (32 * i) for i, w in enumerate(words))

    def generator(self, batch_index):
        return np.random.Generator(np.random.Philox(self.seed_sequence(batch_index)))


# ===== PATHS =====

@dataclass
class BrownianPath:
    """One discretized path; increments default to the node differences."""
    values: np.ndarray
    grid: TimeGrid
    increments: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.grid.steps + 1:
            raise GridMismatch(
                f"path has {self.values.shape[0]} nodes, grid has {self.grid.steps + 1}")
        if self.increments is None:
            self.increments = np.diff(self.values, axis=0)

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class PathBatch:
    """Contiguous block of paths: values (m, N+1, n), increments (m, N, n)."""
    index: int
    start: int
    grid: TimeGrid
    values: np.ndarray
    increments: np.ndarray

    @property
    def size(self):
        return self.values.shape[0]

    def path(self, i):
        return BrownianPath(self.values[i], self.grid, self.increments[i])


@dataclass
class PathEnsemble:
    """M paths on a shared grid; batches are regenerated on demand from their sub-seeds."""
    dim: int
    grid: TimeGrid
    paths: int
    rng: RngSpec
    batch_size: int = DEFAULT_BATCH_SIZE
    stored: np.ndarray = field(default=None, repr=False)
    source: str = None

    def __getstate__(self):
        # file-backed ensembles travel as their path; workers reopen the memmap
        state = dict(self.__dict__)
        if self.source is not None:
            state['stored'] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if self.source is not None:
            self.stored = _open_payload(self.source, self.shape)

    @property
    def shape(self):
        return self.paths, self.grid.steps + 1, self.dim

    @property
    def num_batches(self):
        return -(-self.paths // self.batch_size)

    def batch_bounds(self, b):
        start = b * self.batch_size
        return start, min(start + self.batch_size, self.paths)

    def batch(self, b):
        if not 0 <= b < self.num_batches:
            raise IndexError(f"batch {b} outside 0..{self.num_batches - 1}")
        start, stop = self.batch_bounds(b)
        if self.stored is not None:
            values = np.array(self.stored[start:stop], dtype=float)
            return PathBatch(b, start, self.grid, values, np.diff(values, axis=1))

        gen = self.rng.generator(b)
        increments = gen.standard_normal((stop - start, self.grid.steps, self.dim))
        increments *= np.sqrt(self.grid.dt)
        values = np.zeros((stop - start, self.grid.steps + 1, self.dim))
        np.cumsum(increments, axis=1, out=values[:, 1:])
        return PathBatch(b, start, self.grid, values, increments)

    def iter_batches(self):
        for b in range(self.num_batches):
            yield self.batch(b)

    def materialize(self):
        """All node values as one (M, N+1, n) array; only sensible for small ensembles."""
        if self.stored is not None:
            return self.stored
        return np.concatenate([pb.values for pb in self.iter_batches()], axis=0)

    def path(self, i):
        b = i // self.batch_size
        pb = self.batch(b)
        return pb.path(i - pb.start)

    def describe(self):
        return {'n': self.dim, 'N': self.grid.steps, 'M': self.paths,
                'seed': int(self.rng.master_seed), 'batch_size': self.batch_size}


def sample_ensemble(n, grid, M, rng, batch_size=DEFAULT_BATCH_SIZE):
    """Sample M Brownian paths of dimension n (lazily, batch by batch)."""
    if int(n) < 1:
        raise ConfigError(f"dimension n must be >= 1, got {n}")
    if grid.steps < 2:
        raise ConfigError(f"grid needs N >= 2 steps, got {grid.steps}")
    if int(M) < 1:
        raise ConfigError(f"path count M must be >= 1, got {M}")
    if int(batch_size) < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    return PathEnsemble(int(n), grid, int(M), rng, int(batch_size))


def coarsen(batch, factor):
    """The same paths observed on every factor-th node (coupled refinement)."""
    if batch.grid.steps % factor:
        raise GridMismatch(f"N={batch.grid.steps} is not divisible by {factor}")
    grid = TimeGrid(batch.grid.steps // factor)
    values = batch.values[:, ::factor]
    return PathBatch(batch.index, batch.start, grid, values, np.diff(values, axis=1))


def linear_test_path(grid, n, direction=0, slope=1.0):
    """Deterministic path x(t) = slope * t * e_direction."""
    values = np.zeros((grid.steps + 1, n))
    values[:, direction] = slope * grid.nodes
    return BrownianPath(values, grid)


def constant_test_path(grid, c):
    """Deterministic path x(t) = c (does not start at 0; used for derivative checks)."""
    c = np.asarray(c, dtype=float)
    return BrownianPath(np.tile(c, (grid.steps + 1, 1)), grid)


# ===== QUADRATURE AND ITO SUMS =====

@dataclass
class GridFunctionH:
    """Discretized element of H = L^2(0,1; R^n): vector values on the grid nodes."""
    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.grid.steps + 1:
            raise GridMismatch(
                f"field has {self.values.shape[0]} nodes, grid has {self.grid.steps + 1}")

    @property
    def dim(self):
        return self.values.shape[1]

    def inner(self, other):
        self.grid.check_same(other.grid)
        return float(quadrature((self.values * other.values).sum(axis=-1)))

    def norm(self):
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def __add__(self, other):
        self.grid.check_same(other.grid)
        return GridFunctionH(self.values + other.values, self.grid)

    def __sub__(self, other):
        self.grid.check_same(other.grid)
        return GridFunctionH(self.values - other.values, self.grid)

    def scaled(self, a):
        return GridFunctionH(a * self.values, self.grid)


def quadrature(values, axis=-1):
    """Trapezoid rule over [0,1] along the node axis; exact for affine integrands."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    steps = values.shape[-1] - 1
    if steps < 1:
        raise GridMismatch("quadrature needs at least two nodes")
    return (values[..., 1:-1].sum(axis=-1) + 0.5 * (values[..., 0] + values[..., -1])) / steps


def h_inner_batch(a, b):
    """<a, b>_H for batched fields (..., N+1, n)."""
    return quadrature((a * b).sum(axis=-1))


def forward_ito_batch(h_values, increments):
    """Left-endpoint sums sum_k <h(t_k), dx_k> for fields (N+1, n) or (m, N+1, n)."""
    h_values = np.asarray(h_values, dtype=float)
    if h_values.shape[-2] != increments.shape[-2] + 1:
        raise GridMismatch("integrand and increments live on different grids")
    if h_values.ndim == 2:
        return np.einsum('kd,mkd->m', h_values[:-1], increments)
    return np.einsum('mkd,mkd->m', h_values[:, :-1], increments)


def backward_ito_batch(u_values, increments):
    """Right-endpoint sums sum_k <u(t_{k+1}), dx_k>."""
    u_values = np.asarray(u_values, dtype=float)
    if u_values.shape[-2] != increments.shape[-2] + 1:
        raise GridMismatch("integrand and increments live on different grids")
    if u_values.ndim == 2:
        return np.einsum('kd,mkd->m', u_values[1:], increments)
    return np.einsum('mkd,mkd->m', u_values[:, 1:], increments)


def forward_ito(h, path):
    """Discrete Wiener/Ito integral of h along the path (left endpoint)."""
    h.grid.check_same(path.grid)
    return float(forward_ito_batch(h.values, path.increments[None])[0])


def backward_ito(u, path):
    """Discrete backward Ito integral of u along the path (right endpoint)."""
    u.grid.check_same(path.grid)
    return float(backward_ito_batch(u.values, path.increments[None])[0])


def increment_statistics(ensemble):
    """Per-coordinate accumulators of the increments and of x(1), merged over batches."""
    incr, endpoint = [], []
    for pb in ensemble.iter_batches():
        incr.append(RunningStats.from_array(pb.increments.reshape(-1, ensemble.dim)))
        endpoint.append(RunningStats.from_array(pb.values[:, -1, :]))
    return {'increments': merge_all(incr), 'endpoint': merge_all(endpoint)}


# ===== PERSISTENCE =====

def persist_ensemble(ensemble, file):
    """Write the ensemble in the little-endian binary layout; returns the path."""
    file = Path(file)
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header['magic'] = MAGIC
    header['version'] = FORMAT_VERSION
    header['n'] = ensemble.dim
    header['N'] = ensemble.grid.steps
    header['M'] = ensemble.paths
    header['seed'] = int(ensemble.rng.master_seed)
    header['batch_size'] = ensemble.batch_size
    with open(file, 'wb') as f:
        f.write(header.tobytes())
        for pb in ensemble.iter_batches():
            f.write(np.ascontiguousarray(pb.values, dtype=PAYLOAD_DTYPE).tobytes())
    return file


def _read_header(file):
    with open(file, 'rb') as f:
        raw = f.read(HEADER_DTYPE.itemsize)
    if len(raw) < HEADER_DTYPE.itemsize:
        raise EnsembleFormatError(f"{file}: truncated header")
    header = np.frombuffer(raw, dtype=HEADER_DTYPE)[0]
    if bytes(header['magic']) != MAGIC:
        raise EnsembleFormatError(f"{file}: bad magic {bytes(header['magic'])!r}")
    if int(header['version']) != FORMAT_VERSION:
        raise EnsembleFormatError(f"{file}: unsupported version {int(header['version'])}")
    return header


def describe_ensemble(file):
    """Header metadata (n, N, M, seed, batch_size) of a persisted ensemble."""
    header = _read_header(file)
    return {'n': int(header['n']), 'N': int(header['N']), 'M': int(header['M']),
            'seed': int(header['seed']), 'batch_size': int(header['batch_size'])}


def load_ensemble(file, expected_steps=None, expected_dim=None, expected_paths=None):
    """Load a persisted ensemble; shape expectations are checked against the header."""
    meta = describe_ensemble(file)
    expected = {'N': expected_steps, 'n': expected_dim, 'M': expected_paths}
    for key, want in expected.items():
        if want is not None and meta[key] != int(want):
            raise EnsembleShapeMismatch(f"{file}: header {key}={meta[key]}, expected {want}")

    shape = (meta['M'], meta['N'] + 1, meta['n'])
    size = Path(file).stat().st_size - HEADER_DTYPE.itemsize
    expected_size = int(np.prod(shape)) * PAYLOAD_DTYPE.itemsize
    if size != expected_size:
        raise EnsembleFormatError(
            f"{file}: payload holds {size} bytes, header implies {expected_size}")
    grid = TimeGrid(meta['N'])
    return PathEnsemble(meta['n'], grid, meta['M'], RngSpec(meta['seed']),
                        meta['batch_size'], stored=_open_payload(file, shape),
                        source=str(file))


def _open_payload(file, shape):
    """Read-only memmap of the node values; batches copy only their own slice."""
    return np.memmap(file, dtype=PAYLOAD_DTYPE, mode='r', offset=HEADER_DTYPE.itemsize,
                     shape=shape)
