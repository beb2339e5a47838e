"""
Run Configuration
Loads a dotenv-format file of dotted keys (market.T=2, claim.K=1, ...) into a
validated RunConfig. Every error names the line of the offending key.
"""

import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from src.models.gbm_model import Claim, GbmParams, named_claim
from src.simulation.mc_sim import SimConfig
from src.utils.errors import ConfigurationError
from src.utils.num_core import QuadratureConfig, RootConfig

load_dotenv()

logger = logging.getLogger(__name__)

CLAIM_NAMES = ('call', 'call_quadrature', 'digital', 'bull_spread')
STRATEGY_SOURCES = ('simulate',)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got '{text}'")
    return int(value)


def _parse_float_list(text: str) -> Tuple[float, ...]:
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ValueError("expected a nonempty comma-separated list")
    return tuple(float(item) for item in items)


def _parse_drift(text: str) -> Tuple[Tuple[float, float], ...]:
    pieces = []
    for item in text.split(','):
        start, sep, value = item.partition(':')
        if not sep:
            raise ValueError(f"drift piece '{item.strip()}' is not 'time:value'")
        pieces.append((float(start), float(value)))
    return tuple(pieces)


def _parse_str(text: str) -> str:
    text = text.strip()
    if not text:
        raise ValueError("expected a nonempty value")
    return text


# key -> (RunConfig field, parser)
SCHEMA: Dict[str, Tuple[str, Callable[[str], object]]] = {
    'market.T': ('T', float),
    'market.a': ('a', float),
    'market.rho': ('rho', float),
    'market.drift': ('drift', _parse_drift),
    'claim.payoff': ('payoff', _parse_str),
    'claim.K': ('strike', float),
    'claim.cap': ('cap', float),
    'solve.g': ('g', float),
    'tables.rho': ('tables_rho', _parse_float_list),
    'tables.g': ('tables_g', _parse_float_list),
    'quad.nodes': ('quad_nodes', _parse_int),
    'quad.truncation_sd': ('quad_truncation_sd', float),
    'quad.abs_tol': ('quad_abs_tol', float),
    'quad.max_panels': ('quad_max_panels', _parse_int),
    'root.abs_tol': ('root_abs_tol', float),
    'root.x_tol': ('root_x_tol', float),
    'root.max_iter': ('root_max_iter', _parse_int),
    'root.bracket_growth': ('root_bracket_growth', float),
    'mc.paths': ('mc_paths', _parse_int),
    'mc.steps': ('mc_steps', _parse_int),
    'mc.seed': ('mc_seed', _parse_int),
    'mc.antithetic': ('mc_antithetic', _parse_bool),
    'mc.chunk': ('mc_chunk', _parse_int),
    'mc.dump_paths': ('mc_dump_paths', _parse_int),
    'strategy.points': ('strategy_points', _parse_int),
    'strategy.seed': ('strategy_seed', _parse_int),
    'strategy.source': ('strategy_source', _parse_str),
    'oracle.count': ('oracle_count', _parse_int),
    'oracle.max_atoms': ('oracle_max_atoms', _parse_int),
    'oracle.seed': ('oracle_seed', _parse_int),
    'output.dir': ('output_dir', _parse_str),
}


@dataclass(frozen=True)
class RunConfig:
    """Flat run settings; the typed parameter objects are built by validate()."""

    T: float = 2.0
    a: float = 0.5
    rho: float = 0.3
    drift: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),)
    payoff: str = 'call'
    strike: float = 1.0
    cap: float = 1.0
    g: float = 3.0
    tables_rho: Tuple[float, ...] = (0.3, 0.5, 0.75)
    tables_g: Tuple[float, ...] = (0.5, 1.0, 2.0, 3.0)
    quad_nodes: int = 128
    quad_truncation_sd: float = 10.0
    quad_abs_tol: float = 1e-10
    quad_max_panels: int = 4096
    root_abs_tol: float = 1e-10
    root_x_tol: float = 1e-12
    root_max_iter: int = 200
    root_bracket_growth: float = 2.0
    mc_paths: int = 100_000
    mc_steps: int = 2000
    mc_seed: int = 1
    mc_antithetic: bool = False
    mc_chunk: int = 2048
    mc_dump_paths: int = 0
    strategy_points: int = 200
    strategy_seed: int = 42
    strategy_source: str = 'simulate'
    oracle_count: int = 100
    oracle_max_atoms: int = 10
    oracle_seed: int = 7
    output_dir: str = field(default_factory=lambda: os.getenv('MVH_OUTPUT_DIR', 'results'))
    source: Optional[str] = None
    lines: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def params(self, rho: Optional[float] = None) -> GbmParams:
        return GbmParams(T=self.T, a=self.a, rho=self.rho if rho is None else rho, drift=self.drift)

    @property
    def claim(self) -> Claim:
        return named_claim(self.payoff, self.strike, self.cap)

    @property
    def quad(self) -> QuadratureConfig:
        return QuadratureConfig(self.quad_nodes, self.quad_truncation_sd, self.quad_abs_tol, self.quad_max_panels)

    @property
    def root(self) -> RootConfig:
        return RootConfig(self.root_abs_tol, self.root_x_tol, self.root_max_iter, self.root_bracket_growth)

    @property
    def sim(self) -> SimConfig:
        return SimConfig(
            n_paths=self.mc_paths,
            n_steps=self.mc_steps,
            seed=self.mc_seed,
            antithetic=self.mc_antithetic,
            chunk_size=self.mc_chunk,
            dump_paths=self.mc_dump_paths,
        )

    def line_of(self, key: Optional[str]) -> Optional[int]:
        return self.lines.get(key) if key else None

    def validate(self) -> 'RunConfig':
        """
        Build every typed object once so that invariant violations surface at
        load time, tagged with the line of the key that caused them.
        """
        try:
            self.params()
            for rho in self.tables_rho:
                if not 0.0 <= rho < 1.0:
                    raise ConfigurationError(f"tables.rho entries must lie in [0, 1), got {rho}", key='tables.rho')
            self.claim
            self.quad
            self.root
            self.sim
            self._check_scalars()
        except ConfigurationError as e:
            if e.line is None and e.key is not None:
                raise ConfigurationError(e.detail, line=self.line_of(e.key), key=e.key) from e
            raise
        return self

    def _check_scalars(self):
        if self.payoff not in CLAIM_NAMES:
            raise ConfigurationError(f"claim.payoff must be one of {CLAIM_NAMES}", key='claim.payoff')
        if not self.g > 0:
            raise ConfigurationError(f"solve.g must be positive, got {self.g}", key='solve.g')
        if not all(value > 0 for value in self.tables_g):
            raise ConfigurationError("tables.g entries must be positive", key='tables.g')
        if self.strategy_points < 2:
            raise ConfigurationError("strategy.points must be at least 2", key='strategy.points')
        if self.strategy_source not in STRATEGY_SOURCES and not Path(self.strategy_source).suffix == '.csv':
            raise ConfigurationError("strategy.source must be 'simulate' or a .csv path", key='strategy.source')
        if self.oracle_count < 0:
            raise ConfigurationError("oracle.count must be nonnegative", key='oracle.count')
        if not 1 <= self.oracle_max_atoms <= 16:
            raise ConfigurationError("oracle.max_atoms must lie in [1, 16]", key='oracle.max_atoms')
        for key in ('strategy.seed', 'oracle.seed'):
            if getattr(self, SCHEMA[key][0]) < 0:
                raise ConfigurationError(f"{key} must be nonnegative", key=key)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None, **values) -> 'RunConfig':
        """Command-line overrides: --seed sets every seed, --out the output directory."""
        changes = dict(values)
        if seed is not None:
            changes.update(mc_seed=seed, strategy_seed=seed, oracle_seed=seed)
        if out is not None:
            changes['output_dir'] = out
        return replace(self, **changes).validate() if changes else self


def _key_line(original) -> int:
    """Line of the first non-blank character; parse_stream marks where the preceding blank lines start."""
    raw = original.string
    leading = raw[:len(raw) - len(raw.lstrip())]
    return original.line + leading.count('\n')


def parse_config_text(text: str, source: Optional[str] = None) -> RunConfig:
    """
    Parse dotenv-format text. Unknown keys, duplicate keys, malformed lines and
    values of the wrong type raise ConfigurationError with the line number.
    """
    values: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = _key_line(binding.original)
        if binding.error:
            raise ConfigurationError(f"cannot parse '{binding.original.string.strip()}'", line=line)
        if binding.key is None:
            continue
        key = binding.key
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown key '{key}'", line=line, key=key)
        if key in lines:
            raise ConfigurationError(f"duplicate key '{key}' (first on line {lines[key]})", line=line, key=key)
        name, parser = SCHEMA[key]
        try:
            values[name] = parser(binding.value or '')
        except ValueError as e:
            raise ConfigurationError(f"{key}: {e}", line=line, key=key) from e
        lines[key] = line

    config = RunConfig(**values, source=source, lines=lines)
    return config.validate()


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a run configuration file; None gives the defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    config = parse_config_text(text, source=str(path))
    logger.info(f"Loaded config {path} ({len(config.lines)} keys)")
    return config
