import json

import pandas as pd
import pytest

from lab_config import CONFIG_DIR, load_config
from lab_errors import DegenerateGamma
from run_lab import CheckBook, main, provenance_json, run

TINY = CONFIG_DIR / 'tiny.json'


def tiny_config(out_dir, **overrides):
    return load_config(TINY).with_overrides(out_dir=str(out_dir), paths=400, batch_size=100,
                                            **overrides)


@pytest.fixture(scope='module')
def invariants_run(tmp_path_factory):
    out = tmp_path_factory.mktemp('invariants')
    lab, summary = run(tiny_config(out), 'invariants')
    return out, lab, summary


def test_invariants_writes_results(invariants_run):
    out, lab, summary = invariants_run
    for name in ('checks.csv', 'summary.json', 'malliavin_records.csv'):
        assert (out / name).exists()
    first = (out / 'checks.csv').read_text().splitlines()[0]
    assert first.startswith('# config: ')
    assert 'workers' not in first and 'out_dir' not in first

    checks = pd.read_csv(out / 'checks.csv', comment='#')
    identity = checks[checks['check'] == 'malliavin_identity']
    assert len(identity) == 1 and identity['passed'].all()
    oracle = checks[checks['check'] == 'unit_oracle']
    assert len(oracle) == 7 and oracle['passed'].all()

    saved = json.loads((out / 'summary.json').read_text())
    assert saved['checks'] == summary['checks'] == len(checks)
    assert saved['config']['seed'] == 7


def test_tables_carry_provenance(invariants_run):
    out, _, _ = invariants_run
    records = pd.read_csv(out / 'malliavin_records.csv', comment='#')
    assert list(records.columns[:5]) == ['n', 'N', 'M', 'seed', 'method']
    assert (records['M'] == 400).all()


def test_results_do_not_depend_on_workers(tmp_path):
    outputs = []
    for workers in (1, 2):
        out = tmp_path / f'w{workers}'
        run(tiny_config(out, workers=workers), 'invariants')
        outputs.append({f.name: f.read_bytes() for f in sorted(out.glob('*.csv'))})
    assert outputs[0] == outputs[1]


def test_provenance_json_skips_execution_keys(tmp_path):
    a = json.loads(provenance_json(tiny_config(tmp_path / 'a', workers=3)))
    b = json.loads(provenance_json(tiny_config(tmp_path / 'b', workers=1)))
    assert a == b
    assert 'plots' not in a


def test_guarded_records_failure():
    book = CheckBook({'n': 1, 'N': 4, 'M': 2, 'seed': 0})

    def broken():
        raise DegenerateGamma('gamma vanished')

    book.guarded('invariants', 'identities', broken)
    book.within('invariants', 'unit_oracle', 'g', 0.1667, 1 / 6, float('nan'), 1e-3)
    summary = book.summary()
    assert summary['checks'] == 2
    assert summary['passed'] == 1
    assert summary['failed'] == ['invariants/identities DegenerateGamma: gamma vanished']


def test_missing_config_exits_with_two(tmp_path):
    assert main(['invariants', '--config', str(tmp_path / 'nope.json'), '--quiet']) == 2


def test_ensemble_save_and_describe(tmp_path, capsys):
    file = tmp_path / 'ens.bin'
    assert main(['ensemble', 'save', str(file), '--config', str(TINY), '--paths', '40',
                 '--quiet']) == 0
    capsys.readouterr()
    assert main(['ensemble', 'describe', str(file), '--quiet']) == 0
    meta = json.loads(capsys.readouterr().out)
    assert (meta['n'], meta['N'], meta['M'], meta['seed']) == (3, 64, 40, 7)


def test_bad_ensemble_file_exits_with_two(tmp_path):
    bad = tmp_path / 'bad.bin'
    bad.write_bytes(b'junk')
    assert main(['ensemble', 'describe', str(bad), '--quiet']) == 2


@pytest.mark.parametrize('suite', ['density', 'surface', 'ibp', 'sde'])
def test_each_suite_runs_on_tiny_config(tmp_path, suite):
    out = tmp_path / suite
    _, summary = run(tiny_config(out), suite)
    assert (out / 'checks.csv').exists() and (out / 'summary.json').exists()
    assert list(summary['suites']) == [suite]
    assert summary['suites'][suite]['checks'] > 0
    checks = pd.read_csv(out / 'checks.csv', comment='#')
    assert (checks['suite'] == suite).all()


def test_sde_suite_reaches_every_potential(tmp_path):
    out = tmp_path / 'sde'
    lab, _ = run(tiny_config(out), 'sde')
    rows = lab.checks.frame()
    collapse = rows[rows['check'] == 'zero_potential_collapse']
    assert len(collapse) > 0 and collapse['passed'].all()
    densities = pd.read_csv(out / 'sde_densities.csv', comment='#')
    assert set(densities['potential']) == {'zero', 'cos:0.5'}


def test_all_suites_do_not_depend_on_workers(tmp_path):
    outputs = []
    for workers in (1, 2):
        out = tmp_path / f'all{workers}'
        _, summary = run(tiny_config(out, workers=workers), 'all')
        assert set(summary['suites']) == {'invariants', 'density', 'surface', 'ibp', 'sde'}
        outputs.append({f.name: f.read_bytes() for f in sorted(out.glob('*.csv'))})
    assert outputs[0] == outputs[1]
    assert 'checks.csv' in outputs[0] and 'sde_checks.csv' in outputs[0]


def test_main_all_returns_check_status(tmp_path):
    code = main(['all', '--config', str(TINY), '--paths', '400', '--out', str(tmp_path / 'cli'),
                 '--quiet'])
    assert code in (0, 1)
    saved = json.loads((tmp_path / 'cli' / 'summary.json').read_text())
    assert code == (0 if not saved['failed'] else 1)
