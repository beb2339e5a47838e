import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.models.discrete_oracle import BinomialTree, active_set_qp
from src.models.gbm_model import CallClaim, GbmParams, f_eval_call, projection_gap, residual_risk, solve_v
from src.pipeline.reduction import (
    DiscreteBackend,
    FullProblem,
    GbmBackend,
    clip_claim,
    project_claim,
    sandwich_bounds,
    solve_full_problem,
    solve_reduced,
    split_superhedge,
)
from src.utils.errors import ConfigurationError, InsufficientCapitalError, UnsupportedFloorError
from tests.reference_values import reference_params

UNIFORM = [0.25, 0.25, 0.25, 0.25]
PAIRS = [[0, 1], [2, 3]]
H = np.array([0.0, 2.0, 4.0, 8.0])
H1 = np.array([1.0, 1.0, 6.0, 6.0])
FLOOR = np.array([2.0, 2.0, 3.0, 3.0])


@pytest.fixture
def backend():
    return DiscreteBackend(UNIFORM, UNIFORM, PAIRS)


class TestProjection:

    def test_block_means(self, backend):
        assert_allclose(project_claim(FullProblem(3.0, H), backend), H1)

    def test_idempotent_on_observable_claims(self, backend):
        assert_allclose(backend.project(H1), H1)

    def test_orthogonal_to_observable_claims(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.1, 1.0, 6)
        p /= p.sum()
        backend = DiscreteBackend(p, p, [[0, 3], [1, 4, 5], [2]])
        h = rng.uniform(0.0, 10.0, 6)
        residual = h - backend.project(h)
        for _ in range(50):
            y = rng.standard_normal(3)[backend.labels]
            assert abs(backend.expect_p(residual * y)) <= 1e-12

    def test_contracts_second_moment(self):
        rng = np.random.default_rng(4)
        backend = DiscreteBackend(np.full(8, 1 / 8), np.full(8, 1 / 8), [[0, 1, 2], [3], [4, 5, 6, 7]])
        for _ in range(20):
            h = rng.exponential(3.0, 8)
            h1 = backend.project(h)
            assert backend.expect_p(h1 ** 2) <= backend.expect_p(h ** 2) + 1e-12

    def test_gbm_projection_without_correlation(self):
        params = GbmParams(rho=0.0)
        projection = GbmBackend(params).project(CallClaim(1.0))
        values = projection(np.array([-3.0, 0.0, 3.0]))
        assert_allclose(values, f_eval_call(0.0, CallClaim(1.0), params), rtol=1e-14)


class TestClip:

    def test_zero_floor(self):
        clipped = clip_claim(H1, None)
        assert clipped.dominance
        assert clipped.h2 is H1

    def test_equal_floor(self):
        clipped = clip_claim(H1, H1.copy())
        assert clipped.dominance
        assert_allclose(clipped.h2, H1)

    def test_clipped_example(self):
        clipped = clip_claim(H1, FLOOR)
        assert not clipped.dominance
        assert_allclose(clipped.h2, [2.0, 2.0, 6.0, 6.0])
        assert np.all(clipped.h2 >= FLOOR)
        assert_allclose(clipped.h2[clipped.keep], H1[clipped.keep])


class TestSplit:

    def test_clipped_example(self, backend):
        reduced = split_superhedge(3.0, clip_claim(H1, FLOOR), FLOOR, backend)
        assert reduced.g == pytest.approx(1.5)
        assert_allclose(reduced.g_claim, [0.0, 0.0, 3.0, 3.0])
        assert reduced.floor_strategy_capital == pytest.approx(2.5)
        assert not reduced.dominance
        assert reduced.replicable

    def test_zero_floor_passes_through(self, backend):
        reduced = split_superhedge(2.0, clip_claim(H1, None), None, backend)
        assert reduced.g == 2.0
        assert reduced.g_claim is H1
        assert not reduced.trivial and not reduced.replicable

    def test_trivial_branch(self, backend):
        floor = np.array([0.5, 0.5, 1.0, 1.0])
        reduced = split_superhedge(0.75, clip_claim(H1, floor), floor, backend)
        assert reduced.trivial
        assert reduced.g == 0.0
        solved = solve_reduced(reduced, backend)
        assert_allclose(solved.payoff, 0.0)
        assert solved.value == pytest.approx(backend.expect_p(reduced.g_claim ** 2))

    def test_insufficient_capital(self, backend):
        with pytest.raises(InsufficientCapitalError):
            split_superhedge(2.0, clip_claim(H1, FLOOR), FLOOR, backend)


class TestSolveAndBounds:

    def test_zero_floor_matches_pythagoras(self, backend):
        solution = solve_full_problem(FullProblem(1.0, H), backend)
        wealth = solution.bounds.terminal_wealth
        assert solution.reduced.dominance
        assert solution.bounds.lower == pytest.approx(solution.bounds.upper, abs=1e-9)
        assert solution.bounds.attained == pytest.approx(solution.solved.value, abs=1e-12)
        assert backend.expect_q(wealth) == pytest.approx(1.0, abs=1e-12)
        assert solution.total_objective == pytest.approx(backend.expect_p((H - wealth) ** 2), abs=1e-12)
        assert solution.projection_gap == pytest.approx(backend.expect_p((H - H1) ** 2))

    def test_replicable_budget(self, backend):
        solution = solve_full_problem(FullProblem(10.0, H), backend)
        assert solution.reduced.replicable
        assert_allclose(solution.solved.payoff, H1 + 6.5)
        assert solution.solved.value == pytest.approx(6.5 ** 2)

    def test_dominating_floor(self, backend):
        floor = np.array([0.5, 0.5, 1.0, 1.0])
        solution = solve_full_problem(FullProblem(2.0, H, floor), backend)
        bounds = solution.bounds
        assert not bounds.clipped_used
        assert bounds.lower == pytest.approx(bounds.upper, abs=1e-9)
        assert np.all(bounds.terminal_wealth >= floor)
        assert backend.expect_q(bounds.terminal_wealth) == pytest.approx(2.0, abs=1e-12)

    def test_clipped_bounds_bracket_exhaustive_optimum(self, backend):
        problem = FullProblem(3.0, H, FLOOR)
        solution = solve_full_problem(problem, backend)
        bounds = solution.bounds
        assert bounds.clipped_used
        assert bounds.lower <= bounds.attained + 1e-12
        assert bounds.attained <= bounds.upper + 1e-12
        assert np.all(bounds.terminal_wealth >= FLOOR - 1e-12)

        p = np.array(UNIFORM)
        _, best = active_set_qp(p, p, H1 - FLOOR, problem.x - backend.expect_q(FLOOR))
        assert bounds.lower - 1e-9 <= best <= bounds.attained + 1e-9

    def test_gbm_backend_zero_floor(self, call):
        params = reference_params(0.75)
        backend = GbmBackend(params)
        solution = solve_full_problem(FullProblem(3.0, call), backend)
        dual = solve_v(3.0, call, params)
        assert solution.solved.dual.v == pytest.approx(dual.v, rel=1e-9)
        assert solution.bounds.lower == solution.bounds.upper == solution.solved.value
        assert solution.solved.value == pytest.approx(residual_risk(dual, call, params), rel=1e-9)
        assert solution.total_objective == pytest.approx(projection_gap(call, params) + solution.solved.value)

    def test_gbm_backend_rejects_floor(self, call):
        with pytest.raises(UnsupportedFloorError):
            solve_full_problem(FullProblem(3.0, call, call), GbmBackend(reference_params(0.3)))

    def test_bounds_for_gbm_are_exact(self, call):
        backend = GbmBackend(reference_params(0.5))
        reduced = split_superhedge(2.0, clip_claim(backend.project(call), None), None, backend)
        solved = solve_reduced(reduced, backend)
        bounds = sandwich_bounds(FullProblem(2.0, call), solved, backend)
        assert bounds.lower == bounds.attained == bounds.upper
        assert not bounds.clipped_used


class TestDiscreteBackend:

    @pytest.mark.parametrize('blocks', [
        [[0, 1], [1, 2, 3]],
        [[0, 1], [2]],
        [[0, 1], [], [2, 3]],
    ])
    def test_rejects_bad_partition(self, blocks):
        with pytest.raises(ConfigurationError):
            DiscreteBackend(UNIFORM, UNIFORM, blocks)

    def test_rejects_unobservable_density(self):
        with pytest.raises(ConfigurationError):
            DiscreteBackend(UNIFORM, [0.1, 0.4, 0.25, 0.25], PAIRS)

    def test_rejects_unobservable_floor(self, backend):
        with pytest.raises(ConfigurationError):
            backend.floor([1.0, 2.0, 3.0, 3.0])

    def test_floor_replication_on_tree(self):
        tree = BinomialTree(2)
        node_p = tree.node_probabilities(0.5)
        node_q = tree.node_probabilities(tree.q_up)
        split = np.array([0.3, 0.7])
        p = np.outer(node_p, split).ravel()
        q = np.outer(node_q, split).ravel()
        backend = DiscreteBackend(p, q, [[0, 1], [2, 3], [4, 5]], tree=tree)

        floor = np.repeat(np.maximum(tree.prices(2) - 1.0, 0.0), 2)
        h = np.array([1.0, 3.0, 2.0, 2.0, 4.0, 6.0])
        x = backend.expect_q(floor) + 0.5
        solution = solve_full_problem(FullProblem(x, h, floor), backend)

        capital, replication = solution.floor_replication
        assert capital == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert replication.capital == pytest.approx(capital, abs=1e-12)
        assert solution.reduced.g == pytest.approx(0.5, abs=1e-12)
        assert math.isclose(backend.expect_q(solution.bounds.terminal_wealth), x, abs_tol=1e-12)
