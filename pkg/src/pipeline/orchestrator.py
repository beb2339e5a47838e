"""
Hedging Orchestrator
Runs the toolkit's commands (solve, tables, strategy, oracle, simulate) on a
validated RunConfig and writes their result files.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from src.models import gbm_model
from src.models.discrete_oracle import (
    DiscreteMarket,
    dual_solve_discrete,
    load_instance,
    objective,
    qp_solve,
    random_market,
    save_instance,
    theorem_payoff,
)
from src.models.gbm_model import CallClaim, Claim, DualSolution, GbmParams
from src.simulation.mc_sim import Measure, SimConfig, backtest, simulate_paths
from src.utils.config_loader import RunConfig
from src.utils.errors import (
    ConfigurationError,
    HedgingError,
    NumericalError,
    OracleMismatchError,
    TimeAtExpiryError,
)
from src.utils.output_writer import read_path_csv, write_csv, write_json

load_dotenv()

logger = logging.getLogger(__name__)

ORACLE_PAYOFF_TOL = 1e-9
ORACLE_BUDGET_TOL = 1e-12
TAMPER_SIZE = 1e-3


def _resolve_threads(threads: Optional[int]) -> int:
    """Explicit count, else $MVH_THREADS, else 1; anything below 1 is rejected."""
    if threads is not None:
        key, value = '--threads', threads
    else:
        key, raw = 'MVH_THREADS', os.getenv('MVH_THREADS', '1')
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"MVH_THREADS must be an integer, got '{raw}'", key=key)
    if value < 1:
        raise ConfigurationError(f"{key} must be at least 1, got {value}", key=key)
    return value


class HedgingOrchestrator:
    """Runs one command at a time against a fixed configuration."""

    def __init__(self, config: RunConfig, threads: Optional[int] = None):
        self.config = config
        self.threads = _resolve_threads(threads)
        self.output_dir = Path(config.output_dir)
        self.quad = config.quad
        self.root = config.root

    # ------------------------------------------------------------------ solve

    def _dual(self, params: GbmParams, claim: Claim, g: float, allow_replication: bool = False) -> DualSolution:
        """v(g) for 0 < g < E_Q G; at or above E_Q G only when allow_replication is set."""
        if allow_replication and g >= gbm_model.expected_claim_q(claim, params, self.quad):
            logger.info(f"Budget g={g} covers E_Q G: unconstrained replication")
            return gbm_model.replication_dual(claim, params, self.quad, g=g)
        return gbm_model.solve_v(g, claim, params, self.quad, self.root)

    def solve_cell(self, rho: float, g: float) -> Dict:
        """
        Solve the canonical problem at one (rho, g).

        Returns:
            Dictionary with the multiplier, threshold, closed-form values and
            the total risk projection_gap + residual_risk
        """
        params = self.config.params(rho)
        claim = self.config.claim
        dual = self._dual(params, claim, g)
        residual = gbm_model.residual_risk(dual, claim, params, self.quad)
        gap = gbm_model.projection_gap(claim, params, self.quad)
        logger.info(f"Cell rho={rho}, g={g}: v={dual.v:.9g}, residual={residual:.9g}")
        return {
            'rho': rho,
            'g': g,
            'v': dual.v,
            'neg_v': dual.neg_v,
            'h_inv_threshold': dual.h_inv_at_neg_v,
            'budget_residual': dual.budget_residual,
            'iterations': dual.iterations,
            'expected_claim_q': gbm_model.expected_claim_q(claim, params, self.quad),
            'residual_risk': residual,
            'residual_risk_direct': gbm_model.residual_risk_direct(dual, claim, params, self.quad),
            'projection_gap': gap,
            'total_risk': gap + residual,
        }

    def run_solve(self) -> Dict:
        start_time = time.time()
        result = self.solve_cell(self.config.rho, self.config.g)
        result['claim'] = self.config.payoff
        result['market'] = self.config.params().describe()
        write_json(self.output_dir / 'solve.json', result)
        logger.info(f"solve finished in {time.time() - start_time:.2f}s")
        return result

    # ----------------------------------------------------------------- tables

    def _safe_cell(self, cell: Tuple[float, float]) -> Optional[Dict]:
        rho, g = cell
        try:
            return self.solve_cell(rho, g)
        except HedgingError as e:
            logger.error(f"Cell rho={rho}, g={g} failed: {e}", exc_info=True)
            return None

    def _row_values(self, rho: float) -> Dict:
        params = self.config.params(rho)
        claim = self.config.claim
        return {
            'rho': rho,
            'projection_gap': gbm_model.projection_gap(claim, params, self.quad),
            'expected_claim_q': gbm_model.expected_claim_q(claim, params, self.quad),
        }

    def run_tables(self) -> Dict:
        """
        Independent cells over tables.rho x tables.g, written as table1.csv
        (multipliers), table2.csv (residual risk and its sensitivity to g) and
        values.csv (per-rho projection gap and claim price).

        Raises:
            NumericalError: after writing the tables, if any cell failed
        """
        start_time = time.time()
        rhos, budgets = self.config.tables_rho, self.config.tables_g
        cells = [(rho, g) for rho in rhos for g in budgets]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            results = list(pool.map(self._safe_cell, cells))
            values = list(pool.map(self._row_values, rhos))

        table1, table2 = [], []
        for i, rho in enumerate(rhos):
            row_results = results[i * len(budgets):(i + 1) * len(budgets)]
            residuals = [r['residual_risk'] if r else math.nan for r in row_results]
            changes = gbm_model.sensitivity_changes(budgets, residuals) + [math.nan]
            for g, result, residual, change in zip(budgets, row_results, residuals, changes):
                table1.append({'rho': rho, 'g': g, 'neg_v': result['neg_v'] if result else math.nan})
                table2.append({'rho': rho, 'g': g, 'residual': residual, 'change_pct': 100.0 * change})

        write_csv(self.output_dir / 'table1.csv', table1, ['rho', 'g', 'neg_v'])
        write_csv(self.output_dir / 'table2.csv', table2, ['rho', 'g', 'residual', 'change_pct'])
        write_csv(self.output_dir / 'values.csv', values, ['rho', 'projection_gap', 'expected_claim_q'])

        failed = [cell for cell, result in zip(cells, results) if result is None]
        logger.info(f"tables: {len(cells) - len(failed)}/{len(cells)} cells in {time.time() - start_time:.2f}s")
        if failed:
            raise NumericalError(f"{len(failed)} table cells failed: {failed}")
        return {'cells': len(cells), 'table1': table1, 'table2': table2, 'values': values}

    # --------------------------------------------------------------- strategy

    def _strategy_path(self, params: GbmParams, source: str) -> Tuple[np.ndarray, np.ndarray]:
        """(t, b_tilde) rows from a simulated physical path or a CSV file."""
        if source == 'simulate':
            points = self.config.strategy_points
            cfg = SimConfig(n_paths=1, n_steps=max(points, 10), seed=self.config.strategy_seed)
            path = simulate_paths(params, cfg, Measure.PHYSICAL)
            return path.times[:points], path.b_tilde[0, :points]
        frame = read_path_csv(source, ['t', 'b_tilde'])
        return frame['t'].to_numpy(), frame['b_tilde'].to_numpy()

    def _holding(self, t: float, b: float, dual: DualSolution, claim: Claim, params: GbmParams) -> float:
        if isinstance(claim, CallClaim):
            return float(gbm_model.strategy_call(t, b, dual, claim, params, self.quad))
        return float(gbm_model.strategy_general(t, b, dual, claim, params, self.quad))

    def run_strategy(self, source: Optional[str] = None) -> Dict:
        """
        Optimal holding along one path, next to the replication delta of the
        same claim; written as strategy.csv.

        Raises:
            TimeAtExpiryError: a row has t >= T - EPSILON_TIME * T
        """
        start_time = time.time()
        source = source or self.config.strategy_source
        params = self.config.params()
        claim = self.config.claim
        times, b_values = self._strategy_path(params, source)
        late = times >= params.T * (1.0 - gbm_model.EPSILON_TIME)
        if late.any():
            raise TimeAtExpiryError(f"{int(late.sum())} rows at or beyond T - epsilon (first t={times[late][0]})")

        dual = self._dual(params, claim, self.config.g, allow_replication=True)
        replication = gbm_model.replication_dual(claim, params, self.quad)
        rows = []
        for t, b in zip(times, b_values):
            holding = self._holding(t, b, dual, claim, params)
            sample = gbm_model.StrategySample.at(float(t), float(b), holding, expiry=params.T)
            rows.append({
                't': sample.t,
                'b_tilde': sample.b_tilde,
                's_tilde': sample.s_tilde,
                'xi': sample.xi,
                'xi_replication': self._holding(t, b, replication, claim, params),
            })
        path = write_csv(self.output_dir / 'strategy.csv', rows, ['t', 'b_tilde', 's_tilde', 'xi', 'xi_replication'])
        logger.info(f"strategy: {len(rows)} rows in {time.time() - start_time:.2f}s")
        return {'rows': len(rows), 'v': dual.v, 'source': source, 'file': str(path)}

    # ----------------------------------------------------------------- oracle

    def _check_instance(self, market: DiscreteMarket, g: float, rng: np.random.Generator) -> Dict:
        """Closed-form payoff vs exhaustive QP, budget identity and the tamper test."""
        v = dual_solve_discrete(market, g)
        payoff = theorem_payoff(market, v)
        qp_payoff = qp_solve(market, g)
        deviation = float(np.max(np.abs(payoff - qp_payoff)))
        budget_error = abs(math.fsum(market.q * payoff) - g)

        best = objective(market, payoff)
        tampered_gain = math.nan
        j = int(rng.integers(market.n))
        shift = market.q[j] * TAMPER_SIZE
        others = [k for k in range(market.n) if k != j and market.q[k] * payoff[k] >= shift]
        if others:
            k = max(others, key=lambda idx: market.q[idx] * payoff[idx])
            tampered = payoff.copy()
            tampered[j] += TAMPER_SIZE
            tampered[k] -= shift / market.q[k]
            tampered_gain = objective(market, tampered) - best

        passed = (
            deviation <= ORACLE_PAYOFF_TOL
            and budget_error <= ORACLE_BUDGET_TOL * max(1.0, g)
            and not tampered_gain <= 0.0
        )
        return {
            'n': market.n,
            'g': g,
            'v': v,
            'objective': best,
            'max_deviation': deviation,
            'budget_error': budget_error,
            'tampered_gain': tampered_gain,
            'passed': passed,
        }

    def run_oracle(
        self,
        count: Optional[int] = None,
        max_atoms: Optional[int] = None,
        seed: Optional[int] = None,
        replay: Sequence[str] = (),
    ) -> Dict:
        """
        Sweep random discrete markets (plus replay files) through the oracle.
        Failing instances are dumped as replay JSON.

        Raises:
            OracleMismatchError: any instance failed, after the report is written
        """
        start_time = time.time()
        count = self.config.oracle_count if count is None else count
        max_atoms = self.config.oracle_max_atoms if max_atoms is None else max_atoms
        seed = self.config.oracle_seed if seed is None else seed
        rng = np.random.default_rng(seed)

        instances: List[Tuple[str, DiscreteMarket, float]] = []
        for i in range(count):
            n = int(rng.integers(min(2, max_atoms), max_atoms + 1))
            market, g = random_market(rng, n)
            instances.append((f"random_{i:04d}", market, g))
        for path in replay:
            market, g = load_instance(path)
            instances.append((Path(path).stem, market, g))

        checks = []
        for name, market, g in instances:
            check = self._check_instance(market, g, rng)
            check['instance'] = name
            if not check['passed']:
                dumped = save_instance(self.output_dir / 'oracle_failures' / f"{name}.json", market, g)
                logger.warning(f"Oracle mismatch on {name}: deviation={check['max_deviation']:.3g}, dumped to {dumped}")
            checks.append(check)

        failures = [c['instance'] for c in checks if not c['passed']]
        report = {
            'count': len(checks),
            'seed': seed,
            'max_atoms': max_atoms,
            'passed': not failures,
            'max_deviation': max((c['max_deviation'] for c in checks), default=0.0),
            'max_budget_error': max((c['budget_error'] for c in checks), default=0.0),
            'min_tampered_gain': min((c['tampered_gain'] for c in checks if not math.isnan(c['tampered_gain'])),
                                     default=math.nan),
            'failures': failures,
        }
        write_json(self.output_dir / 'oracle.json', {**report, 'instances': checks})
        logger.info(f"oracle: {len(checks)} instances, {len(failures)} failures in {time.time() - start_time:.2f}s")
        if failures:
            raise OracleMismatchError(f"{len(failures)} of {len(checks)} instances disagree: {failures}")
        return report

    # --------------------------------------------------------------- simulate

    def run_simulate(self, zero_strategy: bool = False, sim: Optional[SimConfig] = None) -> Dict:
        """Monte Carlo back-test of the optimal (or zero) strategy; writes risk_report.json."""
        start_time = time.time()
        params = self.config.params()
        claim = self.config.claim
        sim = sim or self.config.sim
        dual = self._dual(params, claim, self.config.g, allow_replication=True)
        result = backtest(params, claim, dual, sim, self.quad, zero_strategy=zero_strategy, threads=self.threads)
        report = result.report.to_dict()
        report['zero_strategy'] = zero_strategy
        write_json(self.output_dir / 'risk_report.json', report)
        if result.dump is not None:
            write_csv(self.output_dir / 'paths.csv', result.dump)
        logger.info(f"simulate finished in {time.time() - start_time:.1f}s")
        return report
