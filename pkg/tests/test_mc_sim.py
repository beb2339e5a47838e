import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.models.gbm_model import expected_claim_q, named_claim, replication_dual, solve_v
from src.simulation.mc_sim import (
    Measure,
    SimConfig,
    StrategyGrid,
    backtest,
    estimate_risk,
    make_strategy,
    path_normals,
    perturbation_gaps,
    rollout_hedge,
    simulate_paths,
    violation_tolerance,
)
from src.utils.errors import ConfigurationError
from tests.reference_values import PROJECTION_GAP, RESIDUAL_RISK

SMALL = SimConfig(n_paths=4000, n_steps=20, seed=11)


@pytest.fixture(scope='module')
def physical(params_075):
    return simulate_paths(params_075, SMALL, Measure.PHYSICAL)


@pytest.fixture(scope='module')
def martingale(params_075):
    return simulate_paths(params_075, SMALL, Measure.MARTINGALE)


class TestSimConfig:

    @pytest.mark.parametrize('kwargs, key', [
        ({'n_steps': 5}, 'mc.steps'),
        ({'n_paths': 0}, 'mc.paths'),
        ({'seed': -1}, 'mc.seed'),
        ({'n_paths': 3, 'antithetic': True}, 'mc.antithetic'),
        ({'n_paths': 3, 'dump_paths': 4}, 'mc.dump_paths'),
    ])
    def test_rejects_invalid(self, kwargs, key):
        with pytest.raises(ConfigurationError) as info:
            SimConfig(**kwargs)
        assert info.value.key == key


class TestPaths:

    def test_normals_are_keyed_by_path(self):
        assert_array_equal(path_normals(5, 3, 10), path_normals(5, 3, 10))
        assert not np.array_equal(path_normals(5, 3, 10), path_normals(5, 4, 10))
        assert not np.array_equal(path_normals(5, 3, 10), path_normals(6, 3, 10))

    def test_antithetic_pairs(self):
        assert_array_equal(path_normals(5, 1, 10, antithetic=True), -path_normals(5, 0, 10, antithetic=True))
        assert_array_equal(path_normals(5, 4, 10, antithetic=True), path_normals(5, 2, 10))

    def test_subset_matches_full_run(self, params_075, physical):
        subset = simulate_paths(params_075, SMALL, Measure.PHYSICAL, path_indices=np.array([7, 1234]))
        assert_array_equal(subset.b_tilde, physical.b_tilde[[7, 1234]])
        assert_array_equal(subset.s, physical.s[[7, 1234]])

    def test_physical_moments(self, params_075, physical):
        b_T = physical.b_tilde[:, -1]
        assert b_T.mean() == pytest.approx(params_075.a1 * params_075.T, abs=0.1)
        assert b_T.var(ddof=1) == pytest.approx(params_075.T, abs=0.2)
        assert_allclose(physical.s_tilde, np.exp(physical.b_tilde - 0.5 * physical.times))

    def test_martingale_price(self, martingale):
        assert martingale.b_tilde[:, -1].mean() == pytest.approx(0.0, abs=0.1)
        assert martingale.s_tilde[:, -1].mean() == pytest.approx(1.0, abs=0.2)

    def test_correlation_with_observable(self, params_075, physical):
        log_s = np.log(physical.s[:, -1]) - params_075.drift_integral()
        assert np.corrcoef(log_s, physical.b_tilde[:, -1])[0, 1] == pytest.approx(0.75, abs=0.05)


class TestRollout:

    def test_zero_strategy_keeps_capital(self, physical):
        rolled = rollout_hedge(physical, lambda t, b: np.zeros_like(b), 3.0)
        assert np.all(rolled.wealth == 3.0)

    def test_buy_and_hold_telescopes(self, physical):
        rolled = rollout_hedge(physical, lambda t, b: np.ones_like(b), 2.0, keep_history=True)
        expected = 2.0 + physical.s_tilde[:, -1] - physical.s_tilde[:, 0]
        assert_allclose(rolled.wealth, expected, atol=1e-10)
        assert_allclose(rolled.wealth_path[:, -1], rolled.wealth)
        assert np.all(np.isnan(rolled.xi[:, -1]))

    def test_martingale_gains_have_zero_mean(self, params_075, martingale, dual_075_g3, call):
        strategy, error = make_strategy(call, dual_075_g3, params_075, SMALL)
        assert error is None
        wealth = rollout_hedge(martingale, strategy, 3.0).wealth
        se = wealth.std(ddof=1) / math.sqrt(wealth.size)
        assert abs(wealth.mean() - 3.0) <= 4 * se


class TestEstimates:

    def test_zero_claim_costs_capital_squared(self, params_075, physical):
        nothing = named_claim('digital', strike=1e300)
        wealth = np.full(SMALL.n_paths, 2.0)
        report = estimate_risk(physical.terminal(), nothing, wealth, None, params_075, SMALL, g=2.0)
        assert report.total_risk_mc == 4.0
        assert report.projection_gap_mc == 0.0
        assert math.isnan(report.closed_form_total)
        assert report.violation_rate == 0.0

    def test_violation_tolerance_scales_with_claim(self, params_075, call):
        assert violation_tolerance(call, params_075, 2000) == pytest.approx(10 * math.sqrt(0.001))
        spread = named_claim('bull_spread', cap=3.0)
        assert violation_tolerance(spread, params_075, 200) == pytest.approx(30 * math.sqrt(0.01))

    def test_replication_leaves_projection_gap(self, params_075, call):
        cfg = SimConfig(n_paths=2000, n_steps=200, seed=3)
        dual = replication_dual(call, params_075)
        result = backtest(params_075, call, dual, cfg)
        report = result.report
        assert report.g == pytest.approx(expected_claim_q(call, params_075))
        assert report.residual_mc <= report.projection_gap_mc
        assert report.residual_mc < 0.05 * report.projection_gap_mc

    def test_perturbations_do_not_improve(self, params_075, physical, dual_075_g3, call):
        gaps = perturbation_gaps(physical.terminal(), call, dual_075_g3, params_075, np.random.default_rng(8))
        assert len(gaps) == 20
        for mean, se in gaps:
            assert mean >= -3 * se


class TestBacktest:

    def test_deterministic_across_thread_counts(self, params_075, dual_075_g3, call):
        cfg = SimConfig(n_paths=64, n_steps=20, seed=9, chunk_size=16, dump_paths=2)
        first = backtest(params_075, call, dual_075_g3, cfg, threads=1)
        second = backtest(params_075, call, dual_075_g3, cfg, threads=3)
        assert first.report.to_dict() == second.report.to_dict()
        assert first.dump.equals(second.dump)
        assert len(first.dump) == 2 * (cfg.n_steps + 1)
        assert list(first.dump['path'].unique()) == [0, 1]

    def test_zero_strategy(self, params_075, dual_075_g3, call):
        cfg = SimConfig(n_paths=32, n_steps=10, seed=2)
        report = backtest(params_075, call, dual_075_g3, cfg, zero_strategy=True).report
        assert report.min_terminal_wealth == pytest.approx(3.0)
        assert report.q_mean_wealth == pytest.approx(3.0)
        assert report.violation_rate == 0.0

    def test_general_claim_uses_grid(self, params_075):
        spread = named_claim('bull_spread', strike=1.0, cap=2.0)
        dual = solve_v(0.5 * expected_claim_q(spread, params_075), spread, params_075)
        cfg = SimConfig(n_paths=16, n_steps=10, seed=4, cache_t_nodes=5, cache_b_nodes=41)
        strategy, error = make_strategy(spread, dual, params_075, cfg)
        assert isinstance(strategy, StrategyGrid)
        assert error >= 0.0
        assert strategy(0.0, np.array([1e6]))[0] == pytest.approx(strategy(0.0, np.array([strategy.b_hi]))[0])


@pytest.mark.slow
class TestAcceptance:

    def test_decomposition_at_full_size(self, params_075, dual_075_g3, call):
        report = backtest(params_075, call, dual_075_g3, SimConfig(), threads=4).report
        assert abs(report.total_risk_mc - report.closed_form_total) <= 3 * report.total_risk_se
        assert report.closed_form_total == pytest.approx(PROJECTION_GAP[0.75] + RESIDUAL_RISK[0.75][3], rel=0.01)
        assert report.violation_rate <= 1e-3
        assert abs(report.q_mean_wealth - 3.0) <= 3 * report.q_mean_se

    def test_antithetic_reduces_error(self, params_075, dual_075_g3, call):
        plain = backtest(params_075, call, dual_075_g3, SimConfig(n_paths=20000, n_steps=200)).report
        paired = backtest(params_075, call, dual_075_g3, SimConfig(n_paths=20000, n_steps=200, antithetic=True)).report
        assert paired.projection_gap_se < plain.projection_gap_se
