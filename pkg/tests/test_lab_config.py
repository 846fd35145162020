import json

import numpy as np
import pytest

from lab_config import CONFIG_DIR, DEFAULT_CONFIG, RunConfig, load_config, save_config
from lab_errors import ConfigError


def test_defaults_load():
    config = load_config()
    assert config.dim == DEFAULT_CONFIG['dim']
    assert config.bandwidth == 'silverman'
    assert json.loads(config.to_json())['seed'] == DEFAULT_CONFIG['seed']


@pytest.mark.parametrize('overrides', [
    {'colour': 'blue'},
    {'steps': 1},
    {'steps': 64.0},
    {'seed': -3},
    {'workers': 0},
    {'bandwidth': -0.1},
    {'stehfest_order': 7},
    {'eta_ladder': [0.1, 0.2]},
    {'eps_ladder': [0.1, 0.2]},
    {'r_grid': [0.5, 0.2]},
    {'potentials': ['well:1']},
    {'functionals': [{'id': 'x', 'outer': 'sqrt', 'directions': ['e1']}]},
    {'functionals': [{'id': 'one', 'outer': 'identity', 'directions': ['e1']}]},
    {'ibp_suite': {'functionals': ['nope'], 'directions': ['e1'], 'levels': [0.5]}},
    {'ibp_suite': {'functionals': ['one'], 'directions': ['e1'], 'levels': [0.0]}},
])
def test_invalid_values_are_rejected(overrides):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(overrides)


def test_default_suite_needs_three_dimensions():
    # the default ibp suite uses sin_e3
    with pytest.raises(ConfigError):
        RunConfig.from_dict({'dim': 2})
    suite = {'functionals': ['one'], 'directions': ['e1', 'e2'], 'levels': [0.5]}
    functionals = [{'id': 'w_e1', 'outer': 'identity', 'directions': ['e1']}]
    config = RunConfig.from_dict({'dim': 2, 'ibp_suite': suite, 'functionals': functionals})
    assert set(config.build_directions()) == {'e1', 'e2'}


def test_load_from_file(tmp_path):
    file = tmp_path / 'run.json'
    file.write_text(json.dumps({'paths': 500, 'seed': 3}))
    config = load_config(file)
    assert (config.paths, config.seed, config.steps) == (500, 3, DEFAULT_CONFIG['steps'])

    bad = tmp_path / 'bad.json'
    bad.write_text('{"paths": ')
    with pytest.raises(ConfigError):
        load_config(bad)
    listed = tmp_path / 'list.json'
    listed.write_text('[1, 2]')
    with pytest.raises(ConfigError):
        load_config(listed)
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.json')


def test_save_and_reload(tmp_path):
    config = load_config().with_overrides(paths=250, eps_ladder=[0.3, 0.1])
    save_config(config, tmp_path / 'saved.json')
    assert load_config(tmp_path / 'saved.json') == config


def test_with_overrides_ignores_none():
    config = load_config()
    same = config.with_overrides(paths=None, seed=None)
    assert same == config
    assert config.with_overrides(seed=9).seed == 9


def test_ladder_and_levels():
    config = RunConfig.from_dict({'eps_ladder': {'start': 0.4, 'rungs': 3}})
    np.testing.assert_allclose(config.ladder(), [0.4, 0.2, 0.1])
    g = np.linspace(0.0, 2.0, 1001)
    levels = RunConfig.from_dict({'r_grid': {'points': 5, 'low_quantile': 0.1,
                                             'high_quantile': 0.9}}).levels(g)
    np.testing.assert_allclose(levels, [0.2, 0.6, 1.0, 1.4, 1.8])
    explicit = RunConfig.from_dict({'r_grid': [0.3, 0.6]})
    np.testing.assert_array_equal(explicit.levels(g), [0.3, 0.6])


@pytest.mark.parametrize('name', ['tiny.json', 'reference.json'])
def test_shipped_configs_load(name):
    config = load_config(CONFIG_DIR / name)
    assert config.out_dir.startswith('results')
