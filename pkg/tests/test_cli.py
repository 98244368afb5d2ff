import csv
import json

import numpy as np
import pytest

from shuffle_audit import accountant, cli


def run(tmp_path, *argv):
    return cli.main([*argv, '--output-dir', str(tmp_path)])


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


SMALL = ['--set', 'steps_per_epoch=10', '--set', 'observations=2000', '--set', 'repeats=2',
         '--set', 'chunk_size=256']


def test_accountant_command(tmp_path, capsys):
    assert run(tmp_path, 'accountant', '--sigma', '1.0', '--q', '0.01', '--steps', '100',
               '--delta', '1e-5') == 0
    eps = float(capsys.readouterr().out.split('=')[1])
    assert eps == pytest.approx(0.73, abs=0.05)
    table = rows(tmp_path / 'accountant.csv')
    assert table[0] == ['sigma', 'q', 'steps', 'delta', 'epsilon', 'truncation_mass']
    manifest = json.loads((tmp_path / 'run_manifest.json').read_text())
    assert {'config', 'seed', 'git_revision', 'wall_time_s'} <= set(manifest)


def test_tradeoff_command(tmp_path):
    assert run(tmp_path, 'tradeoff', '--eps', '1.0', '--delta', '1e-5', '--points', '101') == 0
    table = rows(tmp_path / 'tradeoff.csv')
    assert table[0] == ['alpha', 'beta']
    assert len(table) == 102
    for a, b in table[1:]:
        assert float(b) == accountant.tradeoff_epsdelta(1.0, 1e-5, float(a))


def test_odd_observations_exit_2(tmp_path, capsys):
    assert run(tmp_path, 'audit', '--set', 'steps_per_epoch=10', '--set', 'observations=11') == 2
    err = capsys.readouterr().err
    assert 'even' in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize('argv', [
    ['audit', '--set', 'steps_per_epoch=10', '--set', 'colour=blue'],
    ['audit', '--set', 'noequals'],
    ['audit', '--config', 'does-not-exist.json'],
    ['audit', '--threads', '0', '--set', 'steps_per_epoch=10'],
    ['no-such-command'],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_calibration_failure_exit_3(tmp_path, capsys):
    assert run(tmp_path, 'calibrate', '--eps', '1e-9', '--q', '0.5', '--steps', '10') == 3
    assert 'numerical failure' in capsys.readouterr().err


def test_calibrate_command(tmp_path):
    assert run(tmp_path, 'calibrate', '--eps', '2.0', '--q', '0.1', '--steps', '10') == 0
    sigma = float(rows(tmp_path / 'calibrate.csv')[1][-1])
    eps = accountant.epsilon_at_delta(accountant.PoissonAccountantParams(sigma, 0.1, 10, 1e-5))
    assert abs(eps - 2.0) <= 1e-3


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / 'env'))
    assert cli.main(['tradeoff', '--eps', '1', '--delta', '0', '--points', '3']) == 0
    assert (tmp_path / 'env' / 'tradeoff.csv').exists()


def test_audit_outputs_and_round_trip(tmp_path):
    first, second = tmp_path / 'a', tmp_path / 'b'
    assert run(first, 'audit', *SMALL, '--threads', '3', '--seed', '4') == 0
    header = rows(first / 'results.csv')[0]
    assert header == cli.harness.RESULT_COLUMNS
    assert len(rows(first / 'results.csv')) == 3
    for name in ('tradeoff_raw', 'tradeoff_cp', 'tradeoff_envelope'):
        assert len(rows(first / f'{name}.csv')) > 1
    sidecar = json.loads((first / 'results.json').read_text())
    assert sidecar[0]['plan']['seed'] == 4 and sidecar[0]['idealized']
    assert run(second, 'audit', '--config', str(first / 'run_manifest.json')) == 0
    for f in first.glob('*.csv'):
        assert f.read_bytes() == (second / f.name).read_bytes(), f.name


def test_sweep_expand_cardinality(tmp_path):
    assert run(tmp_path, 'sweep', *SMALL, '--expand', 'steps_per_epoch=5,10',
               '--expand', 'noise_multiplier=0.5,1.0,1.5') == 0
    plans = json.loads((tmp_path / 'plans.json').read_text())
    assert len(plans) == 6
    table = rows(tmp_path / 'steps_sweep.csv')
    assert table[0] == cli.RECIPES['steps_sweep']
    assert len(table) == 1 + 6 * 2
    keys = [(r[0], int(r[1])) for r in table[1:]]
    assert keys == sorted(keys)


def test_sweep_plan_file_and_failures(tmp_path):
    plans = [{'plan_id': 'ok', 'steps_per_epoch': 10, 'observations': 1000, 'repeats': 1},
             {'plan_id': 'bad', 'steps_per_epoch': 10, 'observations': 1000, 'repeats': 1,
              'eps_target': 1e-7}]
    path = tmp_path / 'plans_in.json'
    path.write_text(json.dumps(plans))
    assert run(tmp_path, 'sweep', '--plans', str(path)) == 0
    assert len(rows(tmp_path / 'results.csv')) == 2
    assert 'bad' in (tmp_path / 'steps_sweep.warnings.txt').read_text()
    # a sweep manifest is a valid plan list too
    again = tmp_path / 'again'
    assert run(again, 'sweep', '--plans', str(tmp_path / 'run_manifest.json')) == 0
    assert (again / 'results.csv').read_bytes() == (tmp_path / 'results.csv').read_bytes()


def test_expand_only(tmp_path):
    assert run(tmp_path, 'sweep', *SMALL, '--expand', 'seed=1,2,3', '--expand-only') == 0
    assert len(json.loads((tmp_path / 'plans.json').read_text())) == 3
    assert not (tmp_path / 'results.csv').exists()


def test_debug_partial_shuffle(tmp_path):
    assert run(tmp_path, 'debug-partial-shuffle', '--set', 'batch_size=2', '--set', 'steps_per_epoch=10',
               '--set', 'sampler=partial_shuffle', '--set', 'buffer=4', '--set', 'observations=2000',
               '--set', 'repeats=2', '--set', 'buffer_guesses=1,2,5,10') == 0
    table = rows(tmp_path / 'partial_shuffle.csv')
    assert table[0] == cli.RECIPES['partial_shuffle']
    assert len(table) == 3 and table[1][2] == '4'
    assert [r[0] for r in rows(tmp_path / 'partial_shuffle_guesses.csv')[1:]] == ['1', '2', '5', '10']
    assert run(tmp_path, 'debug-partial-shuffle', '--set', 'steps_per_epoch=10',
               '--set', 'buffer_guesses=1,x') == 2


def test_debug_batch_then_shuffle(tmp_path):
    assert run(tmp_path, 'debug-batch-then-shuffle', '--set', 'batch_size=4', '--set', 'steps_per_epoch=5',
               '--set', 'observations=2000', '--set', 'repeats=2') == 0
    table = rows(tmp_path / 'batch_then_shuffle.csv')
    assert table[0] == cli.RECIPES['batch_then_shuffle']
    assert [r[2] for r in table[1:]] == ['true', 'false', 'true', 'false']


def test_emit_plot_data_empty_and_ordering(tmp_path):
    path = cli.emit_plot_data('steps_sweep', [], tmp_path)
    assert path.read_text() == ','.join(cli.RECIPES['steps_sweep']) + '\n'
    data = [{'plan_id': 'b', 'repeat': 0}, {'plan_id': 'a', 'repeat': 1}, {'plan_id': 'a', 'repeat': 0}]
    cli.emit_plot_data('steps_sweep', data, tmp_path, warnings=['plan c failed'])
    assert [r[:2] for r in rows(tmp_path / 'steps_sweep.csv')[1:]] == [['a', '0'], ['a', '1'], ['b', '0']]
    assert (tmp_path / 'steps_sweep.warnings.txt').read_text() == 'plan c failed\n'
    with pytest.raises(cli.ConfigError):
        cli.emit_plot_data('nope', [], tmp_path)


def test_envelope_rows_exact():
    env = cli.envelope_rows('p', 0.5, 1e-5, 2, points=11)
    assert len(env) == 22
    for r in env:
        assert r['fnr'] == accountant.tradeoff_epsdelta(0.5, 1e-5, r['fpr'])


def test_curve_thinning():
    assert len(cli._thin(10, 100)) == 10
    idx = cli._thin(10_000, 50)
    assert idx[0] == 0 and idx[-1] == 9999 and len(idx) == 50
    assert np.all(np.diff(idx) > 0)
