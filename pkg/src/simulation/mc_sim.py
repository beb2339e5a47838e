"""
Monte Carlo Back-Test
Simulate the two-factor market, roll a strategy in the observable asset
forward on a uniform grid and estimate the hedging objective together with
its orthogonal decomposition into projection gap and residual risk.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import interpolate, special

from src.models import gbm_model
from src.models.gbm_model import EPSILON_TIME, CallClaim, Claim, DualSolution, GbmParams
from src.utils.errors import ConfigurationError
from src.utils.num_core import DEFAULT_QUADRATURE, QuadratureConfig

logger = logging.getLogger(__name__)

# Smallest uniform fed to the inverse normal CDF; random() can return 0
UNIFORM_FLOOR = 2.0 ** -54
INTERPOLATION_BUDGET = 1e-4
INTERPOLATION_SAMPLES = 64
VIOLATION_SCALE = 10.0
GRID_HALFWIDTH_SD = 8.0

StrategyFn = Callable[[float, np.ndarray], np.ndarray]


class Measure(str, Enum):
    PHYSICAL = 'physical'
    MARTINGALE = 'martingale'


@dataclass(frozen=True)
class SimConfig:
    """
    Args:
        n_paths: number of simulated paths (even when antithetic)
        n_steps: uniform steps on [0, T], at least 10
        seed: key of the counter-based generator
        antithetic: pair path 2i+1 with the negated normals of path 2i
        chunk_size: paths per work unit
        dump_paths: number of leading paths written out in full
        cache_t_nodes, cache_b_nodes: strategy grid size for claims without
            a vectorised closed form
    """

    n_paths: int = 100_000
    n_steps: int = 2000
    seed: int = 1
    antithetic: bool = False
    chunk_size: int = 2048
    dump_paths: int = 0
    cache_t_nodes: int = 41
    cache_b_nodes: int = 401

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ConfigurationError(f"mc.paths must be a positive integer, got {self.n_paths}", key='mc.paths')
        if int(self.n_steps) != self.n_steps or self.n_steps < 10:
            raise ConfigurationError(f"mc.steps must be an integer >= 10, got {self.n_steps}", key='mc.steps')
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"mc.seed must be a 64-bit unsigned integer, got {self.seed}", key='mc.seed')
        if self.antithetic and self.n_paths % 2:
            raise ConfigurationError("mc.paths must be even for antithetic sampling", key='mc.antithetic')
        if int(self.chunk_size) != self.chunk_size or self.chunk_size < 1:
            raise ConfigurationError(f"mc.chunk must be a positive integer, got {self.chunk_size}", key='mc.chunk')
        if int(self.dump_paths) != self.dump_paths or not 0 <= self.dump_paths <= self.n_paths:
            raise ConfigurationError(f"mc.dump_paths must lie in [0, mc.paths], got {self.dump_paths}",
                                     key='mc.dump_paths')
        if self.cache_t_nodes < 2 or self.cache_b_nodes < 2:
            raise ConfigurationError("strategy grid needs at least 2 nodes per axis")


class TerminalState(NamedTuple):
    b_tilde: np.ndarray
    s_tilde: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class PathBatch:
    """Paths on the grid `times`; every array is (paths, steps + 1)."""

    indices: np.ndarray
    times: np.ndarray
    measure: Measure
    w_tilde: np.ndarray
    w_hat: np.ndarray
    b_tilde: np.ndarray
    s_tilde: np.ndarray
    s: np.ndarray

    def terminal(self) -> TerminalState:
        return TerminalState(self.b_tilde[:, -1].copy(), self.s_tilde[:, -1].copy(), self.s[:, -1].copy())


class Rollout(NamedTuple):
    wealth: np.ndarray
    xi: Optional[np.ndarray] = None         # (paths, steps + 1), nan at T
    wealth_path: Optional[np.ndarray] = None


@dataclass(frozen=True)
class RiskReport:
    total_risk_mc: float
    total_risk_se: float
    projection_gap_mc: float
    projection_gap_se: float
    residual_mc: float
    residual_se: float
    closed_form_total: float
    direct_total: float
    min_terminal_wealth: float
    violation_rate: float
    violation_tolerance: float
    q_mean_wealth: float
    q_mean_se: float
    g: float
    n_paths: int
    n_steps: int
    seed: int
    antithetic: bool
    interpolation_error: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)


class BacktestResult(NamedTuple):
    report: RiskReport
    dump: Optional[pd.DataFrame]


def path_normals(seed: int, index: int, n_steps: int, antithetic: bool = False) -> np.ndarray:
    """
    Standard normals (n_steps, 2) of one path, from a Philox stream whose
    counter is keyed by the path index, so a path never depends on the
    schedule it was simulated in.
    """
    base = index // 2 if antithetic else index
    generator = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, base]))
    uniforms = np.maximum(generator.random((n_steps, 2)), UNIFORM_FLOOR)
    normals = special.ndtri(uniforms)
    if antithetic and index % 2 == 1:
        normals = -normals
    return normals


def _cumulative(increments: np.ndarray) -> np.ndarray:
    paths = np.zeros((increments.shape[0], increments.shape[1] + 1))
    np.cumsum(increments, axis=1, out=paths[:, 1:])
    return paths


def simulate_paths(
    params: GbmParams,
    cfg: SimConfig,
    measure: Measure = Measure.PHYSICAL,
    path_indices: Optional[np.ndarray] = None,
) -> PathBatch:
    """
    Paths of (W_tilde, W_hat, B_tilde, S_tilde, S). Under the physical measure
    the first factor drives W_tilde and B_tilde = W_tilde + a1 t; under the
    martingale measure it drives B_tilde and W_tilde = B_tilde - a1 t.
    """
    indices = np.arange(cfg.n_paths) if path_indices is None else np.asarray(path_indices, dtype=int)
    times = np.linspace(0.0, params.T, cfg.n_steps + 1)
    dt = params.T / cfg.n_steps

    normals = np.stack([path_normals(cfg.seed, int(i), cfg.n_steps, cfg.antithetic) for i in indices])
    driver = _cumulative(math.sqrt(dt) * normals[..., 0])
    w_hat = _cumulative(math.sqrt(dt) * normals[..., 1])
    del normals

    a1, rho = params.a1, params.rho
    if Measure(measure) is Measure.PHYSICAL:
        w_tilde = driver
        b_tilde = driver + a1 * times
    else:
        b_tilde = driver
        w_tilde = driver - a1 * times
    s_tilde = np.exp(b_tilde - 0.5 * times)
    s = np.exp(rho * w_tilde + math.sqrt(1.0 - rho * rho) * w_hat + params.drift_integral(times))
    return PathBatch(indices, times, Measure(measure), w_tilde, w_hat, b_tilde, s_tilde, s)


def rollout_hedge(paths: PathBatch, strategy: StrategyFn, g: float, keep_history: bool = False) -> Rollout:
    """
    g + sum_k xi(t_k, B_tilde_{t_k}) (S_tilde_{t_{k+1}} - S_tilde_{t_k}).

    The strategy is evaluated at the left end of every step; grid points
    within EPSILON_TIME * T of expiry keep the last evaluable holding.
    """
    times = paths.times
    horizon = times[-1]
    n_paths, n_points = paths.b_tilde.shape
    wealth = np.full(n_paths, float(g))
    xi = np.zeros(n_paths)
    xi_hist = np.full((n_paths, n_points), np.nan) if keep_history else None
    wealth_hist = np.empty((n_paths, n_points)) if keep_history else None
    if keep_history:
        wealth_hist[:, 0] = wealth

    for k in range(n_points - 1):
        t = float(times[k])
        if horizon - t >= EPSILON_TIME * horizon:
            xi = np.broadcast_to(np.asarray(strategy(t, paths.b_tilde[:, k]), dtype=float), (n_paths,))
        wealth = wealth + xi * (paths.s_tilde[:, k + 1] - paths.s_tilde[:, k])
        if keep_history:
            xi_hist[:, k] = xi
            wealth_hist[:, k + 1] = wealth
    return Rollout(wealth, xi_hist, wealth_hist)


class StrategyGrid:
    """
    Bilinear table of a strategy on (t, B_tilde) for claims whose holding
    costs a quadrature per evaluation. B_tilde is clamped to the table range,
    which covers both measures to GRID_HALFWIDTH_SD standard deviations.
    """

    def __init__(self, strategy: StrategyFn, params: GbmParams, t_max: float,
                 t_nodes: int = 41, b_nodes: int = 401):
        spread = GRID_HALFWIDTH_SD * math.sqrt(params.T)
        self.t_max = t_max
        self.b_lo, self.b_hi = -spread, params.a1 * params.T + spread
        self.t_grid = np.linspace(0.0, t_max, t_nodes)
        self.b_grid = np.linspace(self.b_lo, self.b_hi, b_nodes)

        started = time.time()
        table = np.vstack([np.asarray(strategy(float(t), self.b_grid), dtype=float) for t in self.t_grid])
        self._interp = interpolate.RegularGridInterpolator((self.t_grid, self.b_grid), table, method='linear')
        logger.info(f"Strategy grid {t_nodes}x{b_nodes} built in {time.time() - started:.2f}s")

    def __call__(self, t: float, b_tilde: np.ndarray) -> np.ndarray:
        b = np.clip(np.asarray(b_tilde, dtype=float), self.b_lo, self.b_hi)
        t = min(max(float(t), 0.0), self.t_max)
        return self._interp(np.column_stack([np.full(b.shape, t), b]))

    def interpolation_error(self, strategy: StrategyFn, rng: np.random.Generator,
                            samples: int = INTERPOLATION_SAMPLES) -> float:
        """Largest |table - direct| over random states within three standard deviations."""
        t = rng.uniform(0.0, self.t_max, samples)
        spread = 3.0 * math.sqrt(self.t_max)
        b = rng.uniform(-spread, spread + 0.5 * (self.b_hi + self.b_lo), samples)
        direct = np.array([float(np.asarray(strategy(float(ti), np.array([bi])))[0]) for ti, bi in zip(t, b)])
        cached = np.array([float(self(ti, np.array([bi]))[0]) for ti, bi in zip(t, b)])
        return float(np.max(np.abs(direct - cached)))


def make_strategy(
    claim: Claim,
    dual: DualSolution,
    params: GbmParams,
    sim_cfg: SimConfig,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    zero_strategy: bool = False,
) -> Tuple[StrategyFn, Optional[float]]:
    """Strategy used by the rollout, plus the grid interpolation error when a grid is used."""
    if zero_strategy:
        return (lambda t, b: np.zeros_like(b)), None
    if isinstance(claim, CallClaim):
        def call_strategy(t, b):
            return gbm_model.strategy_call(t, b, dual, claim, params, quad_cfg, method='bivariate')
        return call_strategy, None

    def direct(t, b):
        return gbm_model.strategy_general(t, b, dual, claim, params, quad_cfg)

    dt = params.T / sim_cfg.n_steps
    grid = StrategyGrid(direct, params, params.T - dt, sim_cfg.cache_t_nodes, sim_cfg.cache_b_nodes)
    error = grid.interpolation_error(direct, np.random.default_rng(sim_cfg.seed))
    if error > INTERPOLATION_BUDGET:
        logger.warning(f"Strategy grid interpolation error {error:.3g} above budget {INTERPOLATION_BUDGET:g}")
    return grid, error


def _mean_se(values: np.ndarray, antithetic: bool) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if antithetic:
        values = 0.5 * (values[0::2] + values[1::2])
    n = values.size
    mean = math.fsum(values) / n
    if n < 2:
        return mean, math.nan
    variance = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(variance / n)


def _projected(b_T: np.ndarray, claim: Claim, params: GbmParams, cfg: QuadratureConfig) -> np.ndarray:
    if isinstance(claim, CallClaim):
        return gbm_model.f_eval_call(b_T, claim, params)
    return gbm_model.f_eval(b_T, claim, params, cfg)


def violation_tolerance(claim: Claim, params: GbmParams, n_steps: int) -> float:
    """VIOLATION_SCALE * sqrt(dt) * claim scale (the strike for calls)."""
    return VIOLATION_SCALE * math.sqrt(params.T / n_steps) * claim.scale


def estimate_risk(
    terminal: TerminalState,
    claim: Claim,
    wealth: np.ndarray,
    dual: Optional[DualSolution],
    params: GbmParams,
    sim_cfg: SimConfig,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    q_wealth: Optional[np.ndarray] = None,
    g: Optional[float] = None,
    interpolation_error: Optional[float] = None,
) -> RiskReport:
    """
    Sample estimates of E(G - W)^2, E(G - G_tilde)^2 and E(G_tilde - W)^2 from
    physical-measure terminal states, next to the closed forms.

    Args:
        terminal: physical-measure terminal state per path
        wealth: terminal wealth per path (same order)
        dual: solved multiplier; None skips the closed-form totals
        q_wealth: terminal wealth of a martingale-measure run, if any
        g: initial capital; defaults to dual.g
    """
    wealth = np.asarray(wealth, dtype=float)
    g = dual.g if g is None else g
    antithetic = sim_cfg.antithetic
    claim_values = claim.payoff(terminal.s)
    projected = np.asarray(_projected(terminal.b_tilde, claim, params, quad_cfg), dtype=float)

    total, total_se = _mean_se((claim_values - wealth) ** 2, antithetic)
    gap, gap_se = _mean_se((claim_values - projected) ** 2, antithetic)
    residual, residual_se = _mean_se((projected - wealth) ** 2, antithetic)

    closed_form_total = direct_total = math.nan
    if dual is not None:
        closed_gap = gbm_model.projection_gap(claim, params, quad_cfg)
        closed_form_total = closed_gap + gbm_model.residual_risk(dual, claim, params, quad_cfg)
        direct_total = closed_gap + gbm_model.residual_risk_direct(dual, claim, params, quad_cfg)

    tolerance = violation_tolerance(claim, params, sim_cfg.n_steps)
    q_mean, q_se = (math.nan, math.nan) if q_wealth is None else _mean_se(q_wealth, antithetic)
    return RiskReport(
        total_risk_mc=total,
        total_risk_se=total_se,
        projection_gap_mc=gap,
        projection_gap_se=gap_se,
        residual_mc=residual,
        residual_se=residual_se,
        closed_form_total=closed_form_total,
        direct_total=direct_total,
        min_terminal_wealth=float(wealth.min()),
        violation_rate=float(np.mean(wealth < -tolerance)),
        violation_tolerance=tolerance,
        q_mean_wealth=q_mean,
        q_mean_se=q_se,
        g=float(g),
        n_paths=int(wealth.size),
        n_steps=sim_cfg.n_steps,
        seed=sim_cfg.seed,
        antithetic=antithetic,
        interpolation_error=interpolation_error,
    )


def perturbation_gaps(
    terminal: TerminalState,
    claim: Claim,
    dual: DualSolution,
    params: GbmParams,
    rng: np.random.Generator,
    count: int = 20,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> List[Tuple[float, float]]:
    """
    Objective increase, with its standard error, of payoffs mixing the optimal
    (G_tilde + v D_T)^+ with exp(theta B_tilde_T) rescaled to the same
    martingale-measure price. Every admissible mix costs at least as much.
    """
    b = terminal.b_tilde
    projected = np.asarray(_projected(b, claim, params, quad_cfg), dtype=float)
    optimal = np.maximum(projected + dual.v * np.exp(gbm_model.log_density_from_b(b, params)), 0.0)
    base = (projected - optimal) ** 2
    gaps = []
    for _ in range(count):
        theta = rng.uniform(-1.0, 1.0)
        weight = rng.uniform(0.05, 0.5)
        # E_Q exp(theta B_tilde_T) = exp(theta^2 T / 2)
        other = dual.g * np.exp(theta * b - 0.5 * theta * theta * params.T)
        mixed = (1.0 - weight) * optimal + weight * other
        gaps.append(_mean_se((projected - mixed) ** 2 - base, antithetic=False))
    return gaps


def _dump_frame(paths: PathBatch, rolled: Rollout, limit: int) -> pd.DataFrame:
    frames = []
    for row in range(min(limit, paths.indices.size)):
        frames.append(pd.DataFrame({
            'path': int(paths.indices[row]),
            't': paths.times,
            'w_tilde': paths.w_tilde[row],
            'w_hat': paths.w_hat[row],
            'b_tilde': paths.b_tilde[row],
            's_tilde': paths.s_tilde[row],
            's': paths.s[row],
            'xi': rolled.xi[row],
            'wealth': rolled.wealth_path[row],
        }))
    return pd.concat(frames, ignore_index=True)


def backtest(
    params: GbmParams,
    claim: Claim,
    dual: DualSolution,
    sim_cfg: SimConfig,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    zero_strategy: bool = False,
    threads: int = 1,
) -> BacktestResult:
    """
    Physical and martingale-measure runs of the optimal (or zero) strategy
    started from dual.g, chunked over paths and mapped over a thread pool.
    Results are identical for any thread count.
    """
    started = time.time()
    strategy, interpolation_error = make_strategy(claim, dual, params, sim_cfg, quad_cfg, zero_strategy)

    def run_chunk(start: int):
        indices = np.arange(start, min(start + sim_cfg.chunk_size, sim_cfg.n_paths))
        physical = simulate_paths(params, sim_cfg, Measure.PHYSICAL, indices)
        keep = start < sim_cfg.dump_paths
        rolled = rollout_hedge(physical, strategy, dual.g, keep_history=keep)
        dump = _dump_frame(physical, rolled, sim_cfg.dump_paths - start) if keep else None
        terminal = physical.terminal()
        del physical
        martingale = simulate_paths(params, sim_cfg, Measure.MARTINGALE, indices)
        q_wealth = rollout_hedge(martingale, strategy, dual.g).wealth
        logger.debug(f"Chunk at path {start} done ({indices.size} paths)")
        return terminal, rolled.wealth, q_wealth, dump

    starts = range(0, sim_cfg.n_paths, sim_cfg.chunk_size)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(run_chunk, starts))

    terminal = TerminalState(*(np.concatenate([r[0][i] for r in results]) for i in range(3)))
    wealth = np.concatenate([r[1] for r in results])
    q_wealth = np.concatenate([r[2] for r in results])
    dumps = [r[3] for r in results if r[3] is not None]

    report = estimate_risk(
        terminal, claim, wealth, dual, params, sim_cfg, quad_cfg,
        q_wealth=q_wealth, interpolation_error=interpolation_error,
    )
    logger.info(
        f"Back-test: {sim_cfg.n_paths} paths x {sim_cfg.n_steps} steps in {time.time() - started:.1f}s, "
        f"total={report.total_risk_mc:.6g} +/- {report.total_risk_se:.3g}, "
        f"closed form={report.closed_form_total:.6g}"
    )
    return BacktestResult(report, pd.concat(dumps, ignore_index=True) if dumps else None)
