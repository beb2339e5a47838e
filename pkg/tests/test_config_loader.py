from pathlib import Path

import pytest

from src.utils.config_loader import RunConfig, load_config, parse_config_text
from src.utils.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / 'configs'


def test_parses_keys_and_records_lines():
    text = "# market\nmarket.rho=0.5\n\nclaim.K = 2\nmarket.drift=0:1, 1:3\nmc.antithetic=true\n"
    config = parse_config_text(text)
    assert config.rho == 0.5
    assert config.strike == 2.0
    assert config.drift == ((0.0, 1.0), (1.0, 3.0))
    assert config.mc_antithetic is True
    assert config.lines == {'market.rho': 2, 'claim.K': 4, 'market.drift': 5, 'mc.antithetic': 6}
    assert config.params().drift_integral() == pytest.approx(4.0)


def test_defaults_reproduce_numerical_example():
    config = load_config()
    assert (config.T, config.a, config.rho, config.payoff) == (2.0, 0.5, 0.3, 'call')
    assert config.tables_rho == (0.3, 0.5, 0.75)
    assert config.tables_g == (0.5, 1.0, 2.0, 3.0)
    assert config.sim.n_steps == 2000


def test_shipped_config_loads():
    config = load_config(CONFIGS / 'reference.env')
    assert config.rho == 0.75
    assert config.g == 3.0
    assert config.source.endswith('reference.env')


@pytest.mark.parametrize('text, line', [
    ("market.T=2\nmarket.sigma=0.2\n", 2),
    ("market.T=2\nmarket.a=1\nmarket.T=3\n", 3),
    ("mc.paths=abc\n", 1),
    ("market.T=2\nmc.steps=1.5\n", 2),
    ("market.T=2\nthis is not valid\n", 2),
    ("claim.K\n", 1),
])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


@pytest.mark.parametrize('text, line, key', [
    ("market.T=2\n\nmarket.rho=1.2\n", 3, 'market.rho'),
    ("tables.rho=0.3,1.5\nmarket.rho=0.5\n", 1, 'tables.rho'),
    ("quad.nodes=4\n", 1, 'quad.nodes'),
    ("mc.seed=1\nmc.steps=5\n", 2, 'mc.steps'),
    ("claim.payoff=straddle\n", 1, 'claim.payoff'),
    ("oracle.max_atoms=17\n", 1, 'oracle.max_atoms'),
    ("strategy.source=path.txt\n", 1, 'strategy.source'),
    ("solve.g=0\n", 1, 'solve.g'),
])
def test_invariant_errors_name_the_line(text, line, key):
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    assert info.value.key == key
    assert info.value.line == line


def test_overrides():
    config = RunConfig().with_overrides(seed=5, out='elsewhere', rho=0.5)
    assert (config.mc_seed, config.strategy_seed, config.oracle_seed) == (5, 5, 5)
    assert config.output_dir == 'elsewhere'
    assert config.rho == 0.5
    assert RunConfig().with_overrides() == RunConfig()
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides(rho=1.5)


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv('MVH_OUTPUT_DIR', 'from-env')
    assert RunConfig().output_dir == 'from-env'


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / 'absent.env')


def test_lines_after_blank_and_comment_lines():
    text = (CONFIGS / 'reference.env').read_text().replace('claim.payoff=call', 'claim.payoff=straddle')
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    assert info.value.key == 'claim.payoff'
    assert info.value.line == 9
    assert str(info.value).startswith("line 9:")

    config = parse_config_text("\n\n# solver\n\nsolve.g=2\n\n\nmarket.rho=0.5\n")
    assert config.lines == {'solve.g': 5, 'market.rho': 8}
