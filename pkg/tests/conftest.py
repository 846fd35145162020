import sys
from pathlib import Path

import pytest
from hypothesis import settings

PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

import runlog  # noqa: E402
from gradient_sde import potential_from_name  # noqa: E402
from malliavin_core import direction_field, functional_from_spec  # noqa: E402
from path_engine import RngSpec, TimeGrid, sample_ensemble  # noqa: E402
from sample_pass import SampleSpec, run_pass  # noqa: E402

settings.register_profile('lab', max_examples=60, deadline=None)
settings.load_profile('lab')

runlog.QUIET = True

FUNCTIONALS = [
    {'id': 'w_e1', 'outer': 'identity', 'directions': ['e1']},
    {'id': 'tanh_ramp_e1', 'outer': 'tanh', 'directions': ['ramp_e1']},
]
DIRECTIONS = ['e1', 'ramp_e2', 'zero']
POTENTIALS = ['zero', 'cos:0.25']


@pytest.fixture(scope='session')
def small_ensemble():
    """n=3, N=128, M=4000 in 8 batches."""
    return sample_ensemble(3, TimeGrid(128), 4000, RngSpec(11), batch_size=500)


@pytest.fixture(scope='session')
def sample_spec(small_ensemble):
    grid, n = small_ensemble.grid, small_ensemble.dim
    return SampleSpec(
        functionals={spec['id']: functional_from_spec(spec, grid, n) for spec in FUNCTIONALS},
        directions={hid: direction_field(hid, grid, n) for hid in DIRECTIONS},
        potentials={vid: potential_from_name(vid, n) for vid in POTENTIALS},
    )


@pytest.fixture(scope='session')
def samples(small_ensemble, sample_spec):
    return run_pass(small_ensemble, sample_spec)
