import json

import numpy as np
import pandas as pd
import pytest

from app import main
from src.models.discrete_oracle import random_market, save_instance
from tests.reference_values import TABLE1_NEG_V


@pytest.fixture
def run(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv('LOG_DIR', str(tmp_path / 'logs'))
    out = tmp_path / 'out'

    def invoke(*args, config=None):
        argv = ['--out', str(out)]
        if config is not None:
            path = tmp_path / 'run.env'
            path.write_text(config)
            argv += ['--config', str(path)]
        code = main(argv + list(args))
        return code, json.loads(capsys.readouterr().out), out

    return invoke


def test_solve(run):
    code, payload, out = run('solve', '--rho', '0.75', '--g', '3')
    assert code == 0
    assert payload['success'] and payload['command'] == 'solve'
    assert payload['result']['neg_v'] == pytest.approx(TABLE1_NEG_V[0.75][3], rel=0.01)
    saved = json.loads((out / 'solve.json').read_text())
    assert saved['market']['rho'] == 0.75
    assert saved['total_risk'] == pytest.approx(saved['projection_gap'] + saved['residual_risk'])


def test_solve_above_claim_price(run):
    code, payload, _ = run('solve', '--rho', '0.75', '--g', '5')
    assert code == 3
    assert not payload['success']
    assert payload['error_type'] == 'OutOfRangeError'


def test_config_error_exit_code(run):
    code, payload, _ = run('solve', config="market.T=2\nmarket.rho=2\n")
    assert code == 2
    assert payload['error_type'] == 'ConfigurationError'
    assert payload['error'].startswith('line 2:')


def test_tables_single_cell(run):
    code, payload, out = run('tables', config="tables.rho=0.75\ntables.g=3\n")
    assert code == 0
    assert payload['result']['cells'] == 1
    table1 = pd.read_csv(out / 'table1.csv')
    table2 = pd.read_csv(out / 'table2.csv')
    assert list(table1.columns) == ['rho', 'g', 'neg_v']
    assert len(table1) == 1 and len(table2) == 1
    assert table2['change_pct'].isna().all()
    assert (out / 'values.csv').exists()


def test_oracle_sweep(run):
    code, payload, out = run('oracle', '--count', '5', '--max-atoms', '6')
    assert code == 0
    assert payload['result']['passed']
    assert payload['result']['max_deviation'] <= 1e-9
    assert json.loads((out / 'oracle.json').read_text())['count'] == 5


def test_oracle_empty_sweep(run):
    code, payload, _ = run('oracle', '--count', '0')
    assert code == 0
    assert payload['result']['count'] == 0
    assert payload['result']['passed']


def test_oracle_replay(run, tmp_path):
    market, g = random_market(np.random.default_rng(0), 4)
    path = save_instance(tmp_path / 'case.json', market, g)
    code, payload, _ = run('oracle', '--count', '0', '--replay', str(path))
    assert code == 0
    assert payload['result']['count'] == 1


def test_oracle_atom_limit(run):
    code, payload, _ = run('oracle', '--max-atoms', '17')
    assert code == 2
    assert payload['error_type'] == 'SizeLimitError'


def test_strategy_from_csv(run, tmp_path):
    source = tmp_path / 'path.csv'
    source.write_text("t,b_tilde\n0.0,0.0\n0.5,0.1\n1.0,-0.2\n")
    code, payload, out = run('strategy', '--source', str(source))
    assert code == 0
    frame = pd.read_csv(out / 'strategy.csv')
    assert list(frame.columns) == ['t', 'b_tilde', 's_tilde', 'xi', 'xi_replication']
    assert len(frame) == 3
    assert frame['xi'].notna().all()


def test_strategy_rejects_expiry(run, tmp_path):
    source = tmp_path / 'path.csv'
    source.write_text("t,b_tilde\n0.0,0.0\n2.0,0.3\n")
    code, payload, _ = run('strategy', '--source', str(source))
    assert code == 3
    assert payload['error_type'] == 'TimeAtExpiryError'


def test_strategy_is_deterministic(run):
    _, _, out = run('--seed', '3', 'strategy', '--points', '5')
    first = (out / 'strategy.csv').read_text()
    _, _, out = run('--seed', '3', 'strategy', '--points', '5')
    assert (out / 'strategy.csv').read_text() == first
    assert len(first.splitlines()) == 6


def test_simulate_is_deterministic(run):
    code, payload, out = run('simulate', '--paths', '64', '--steps', '10')
    assert code == 0
    first = (out / 'risk_report.json').read_text()
    run('simulate', '--paths', '64', '--steps', '10')
    assert (out / 'risk_report.json').read_text() == first
    assert payload['result']['n_paths'] == 64


def test_tables_are_deterministic(run):
    config = "tables.rho=0.3,0.75\ntables.g=1,3\n"
    code, _, out = run('--threads', '2', 'tables', config=config)
    assert code == 0
    first = {name: (out / name).read_text() for name in ('table1.csv', 'table2.csv', 'values.csv')}
    code, _, out = run('--threads', '2', 'tables', config=config)
    assert code == 0
    assert {name: (out / name).read_text() for name in first} == first


def test_zero_threads_rejected(run):
    code, payload, _ = run('--threads', '0', 'solve')
    assert code == 2
    assert payload['error_type'] == 'ConfigurationError'
    assert '--threads' in payload['error']


@pytest.mark.parametrize('value', ['abc', '2.5', '0', '-3'])
def test_bad_thread_environment(run, monkeypatch, value):
    monkeypatch.setenv('MVH_THREADS', value)
    code, payload, _ = run('solve')
    assert code == 2
    assert payload['error_type'] == 'ConfigurationError'
    assert 'MVH_THREADS' in payload['error']


def test_thread_environment(run, monkeypatch):
    monkeypatch.setenv('MVH_THREADS', '3')
    code, payload, _ = run('tables', config="tables.rho=0.75\ntables.g=3\n")
    assert code == 0
    assert payload['result']['cells'] == 1
