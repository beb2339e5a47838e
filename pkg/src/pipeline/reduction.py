"""
Reduction
Chain from the full problem (capital x, unobservable claim H, observable floor
H_tilde) to the canonical problem (budget g, zero floor, observable claim G):

    project  ->  H1 = E[H | observable]
    clip     ->  H2 = max(H1, H_tilde)
    split    ->  G = H2 - H_tilde, g = x - floor capital
    solve    ->  optimal payoff of the canonical problem
    bounds   ->  objective bracket when H1 does not dominate the floor

Two backends implement the market contract: DiscreteBackend (finite atoms,
exact conditional expectations and replication) and GbmBackend (lognormal
market, zero floor only).
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.models import gbm_model
from src.models.discrete_oracle import (
    BinomialTree,
    DiscreteMarket,
    Replication,
    dual_solve_discrete,
    objective,
    replicate_binomial,
    theorem_payoff,
)
from src.models.gbm_model import Claim, DualSolution, GbmParams
from src.utils.errors import ConfigurationError, InsufficientCapitalError, UnsupportedFloorError
from src.utils.num_core import DEFAULT_QUADRATURE, DEFAULT_ROOT, QuadratureConfig, RootConfig, integrate_gaussian

logger = logging.getLogger(__name__)

CAPITAL_TOL = 1e-12
MEASURABILITY_TOL = 1e-12


@dataclass(frozen=True)
class FullProblem:
    """
    Args:
        x: initial capital
        h_claim: claim H (atom vector for the discrete backend, Claim for GBM)
        h_tilde: observable floor H_tilde; None means zero
    """

    x: float
    h_claim: Any
    h_tilde: Any = None


@dataclass(frozen=True)
class ReducedProblem:
    g: float
    g_claim: Any
    floor_strategy_capital: float
    dominance: bool
    trivial: bool = False
    replicable: bool = False
    floor_claim: Any = None


class ClippedClaim(NamedTuple):
    h2: Any
    dominance: bool
    keep: Optional[np.ndarray]  # atoms where H1 >= H_tilde


@dataclass(frozen=True)
class SolvedReduction:
    reduced: ReducedProblem
    payoff: Optional[np.ndarray]
    dual: Union[float, DualSolution, None]
    value: float
    value_direct: float = math.nan


@dataclass(frozen=True)
class BoundsReport:
    lower: float
    upper: float
    attained: float
    clipped_used: bool
    terminal_wealth: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FullSolution:
    projection_gap: float
    reduced: ReducedProblem
    solved: SolvedReduction
    bounds: BoundsReport
    total_objective: float
    floor_replication: Optional[Tuple[float, Any]] = None


class DiscreteBackend:
    """
    Finite market whose observable information is a partition of the atoms.

    Args:
        p: physical atom probabilities
        q: martingale-measure atom probabilities; q/p must be constant on blocks
        blocks: partition of atom indices into observable events
        tree: optional binomial tree whose terminal nodes are the blocks, in
            order of the number of up moves; enables strategy replication
    """

    name = 'discrete'

    def __init__(self, p: Sequence[float], q: Sequence[float], blocks: Sequence[Sequence[int]],
                 tree: Optional[BinomialTree] = None):
        base = DiscreteMarket(p, q, np.zeros(len(p)))
        self.p, self.q = base.p, base.q
        self.blocks = [np.asarray(block, dtype=int) for block in blocks]

        labels = np.full(self.p.size, -1)
        for j, block in enumerate(self.blocks):
            if block.size == 0 or np.any(labels[block] >= 0):
                raise ConfigurationError("blocks must be nonempty and disjoint")
            labels[block] = j
        if np.any(labels < 0):
            raise ConfigurationError("blocks must cover every atom")
        self.labels = labels

        density = base.density
        if not self.is_observable(density, rtol=MEASURABILITY_TOL):
            raise ConfigurationError("density q/p must be constant on every observable block")

        self.tree = tree
        if tree is not None:
            if len(self.blocks) != tree.steps + 1:
                raise ConfigurationError(f"tree with {tree.steps} steps needs {tree.steps + 1} blocks")
            node_q = np.array([self.q[block].sum() for block in self.blocks])
            if not np.allclose(node_q, tree.node_probabilities(tree.q_up), rtol=0, atol=1e-12):
                raise ConfigurationError("block martingale weights disagree with the tree")

    def _block_sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.labels, weights=values, minlength=len(self.blocks))

    def project(self, claim: Sequence[float]) -> np.ndarray:
        """Conditional P-expectation on each block, broadcast back to atoms."""
        claim = np.asarray(claim, dtype=float)
        means = self._block_sums(self.p * claim) / self._block_sums(self.p)
        return means[self.labels]

    def is_observable(self, claim: Sequence[float], rtol: float = 0.0) -> bool:
        claim = np.asarray(claim, dtype=float)
        return bool(np.allclose(claim, claim[self.blocks_first][self.labels], rtol=rtol, atol=rtol))

    @property
    def blocks_first(self) -> np.ndarray:
        return np.array([block[0] for block in self.blocks])

    def floor(self, h_tilde: Any) -> np.ndarray:
        if h_tilde is None:
            return np.zeros(self.p.size)
        h_tilde = np.asarray(h_tilde, dtype=float)
        if np.any(h_tilde < 0):
            raise ConfigurationError("floor claim must be nonnegative")
        if not self.is_observable(h_tilde):
            raise ConfigurationError("floor claim must be observable (constant on blocks)")
        return h_tilde

    def expect_q(self, claim: Any) -> float:
        if claim is None:
            return 0.0
        return math.fsum(self.q * np.asarray(claim, dtype=float))

    def expect_p(self, values: Any) -> float:
        return math.fsum(self.p * np.asarray(values, dtype=float))

    def market(self, g_claim: np.ndarray) -> DiscreteMarket:
        return DiscreteMarket(self.p, self.q, np.maximum(g_claim, 0.0))

    def replicate(self, claim: Any) -> Tuple[float, Optional[Replication]]:
        """Capital E_Q claim and, when a tree is attached, the replicating strategy."""
        capital = self.expect_q(claim)
        if self.tree is None or claim is None:
            return capital, None
        node_values = np.asarray(claim, dtype=float)[self.blocks_first]
        return capital, replicate_binomial(self.tree, node_values)

    def projection_gap(self, h_claim: Any, h1: np.ndarray) -> float:
        diff = np.asarray(h_claim, dtype=float) - h1
        return self.expect_p(diff * diff)


@dataclass(frozen=True)
class GbmProjection:
    """G_tilde = f(B_tilde_T) for a claim H(S_T)."""

    claim: Claim
    params: GbmParams
    cfg: QuadratureConfig = DEFAULT_QUADRATURE

    def __call__(self, b_T):
        if isinstance(self.claim, gbm_model.CallClaim):
            return gbm_model.f_eval_call(b_T, self.claim, self.params)
        return gbm_model.f_eval(b_T, self.claim, self.params, self.cfg)


class GbmBackend:
    """Lognormal market; only the zero floor is supported."""

    name = 'gbm'

    def __init__(self, params: GbmParams, quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
                 root_cfg: RootConfig = DEFAULT_ROOT):
        self.params = params
        self.quad_cfg = quad_cfg
        self.root_cfg = root_cfg

    def project(self, claim: Claim) -> GbmProjection:
        return GbmProjection(claim, self.params, self.quad_cfg)

    def floor(self, h_tilde: Any) -> None:
        if h_tilde is not None:
            raise UnsupportedFloorError("the GBM backend supports only the zero floor")
        return None

    def expect_q(self, claim: Any) -> float:
        if claim is None:
            return 0.0
        if isinstance(claim, GbmProjection):
            claim = claim.claim
        return gbm_model.expected_claim_q(claim, self.params, self.quad_cfg)

    def replicate(self, claim: Any) -> Tuple[float, Optional[Callable]]:
        """Capital E_Q G and the replication delta (t, b) -> xi."""
        if claim is None:
            return 0.0, None
        if isinstance(claim, GbmProjection):
            claim = claim.claim
        dual = gbm_model.replication_dual(claim, self.params, self.quad_cfg)

        def delta(t, b):
            return gbm_model.strategy_general(t, b, dual, claim, self.params, self.quad_cfg)

        return dual.g, delta

    def projection_gap(self, h_claim: Claim, h1: GbmProjection) -> float:
        return gbm_model.projection_gap(h_claim, self.params, self.quad_cfg)


Backend = Union[DiscreteBackend, GbmBackend]


def project_claim(problem: FullProblem, backend: Backend) -> Any:
    """H1 = E(H | observable sigma-field)."""
    return backend.project(problem.h_claim)


def clip_claim(h1: Any, h_tilde: Any) -> ClippedClaim:
    """H2 = H1 1{H1 >= H_tilde} + H_tilde 1{H1 < H_tilde}."""
    if h_tilde is None:
        return ClippedClaim(h1, True, None)
    h1 = np.asarray(h1, dtype=float)
    h_tilde = np.asarray(h_tilde, dtype=float)
    keep = h1 >= h_tilde
    return ClippedClaim(np.where(keep, h1, h_tilde), bool(keep.all()), keep)


def split_superhedge(x: float, clipped: ClippedClaim, h_tilde: Any, backend: Backend) -> ReducedProblem:
    """
    Separate the floor: the canonical claim is G = H2 - H_tilde, which equals
    (H1 - H_tilde) 1{H1 >= H_tilde}. Under dominance the whole floor is
    superhedged (g = x - E_Q H_tilde); otherwise only H_tilde 1{H1 >= H_tilde}
    is (g = x - E_Q[H_tilde 1{H1 >= H_tilde}]).

    Raises:
        InsufficientCapitalError: x < E_Q H_tilde
    """
    floor_capital = backend.expect_q(h_tilde)
    if x < floor_capital - CAPITAL_TOL * max(1.0, abs(floor_capital)):
        raise InsufficientCapitalError(f"capital x={x!r} below floor price E_Q H_tilde={floor_capital!r}")

    if h_tilde is None:
        g_claim, floor_claim = clipped.h2, None
        g = x
    else:
        g_claim = np.maximum(clipped.h2 - h_tilde, 0.0)
        floor_claim = h_tilde if clipped.dominance else h_tilde * clipped.keep
        g = x - backend.expect_q(floor_claim)

    claim_capital = backend.expect_q(g_claim)
    trivial = g <= CAPITAL_TOL * max(1.0, abs(x))
    if trivial:
        logger.info("Budget exhausted by the floor: trivial branch")
        g = 0.0
    return ReducedProblem(
        g=g,
        g_claim=g_claim,
        floor_strategy_capital=floor_capital,
        dominance=clipped.dominance,
        trivial=trivial,
        replicable=(not trivial) and g >= claim_capital,
        floor_claim=floor_claim,
    )


def _solve_discrete(reduced: ReducedProblem, backend: DiscreteBackend) -> SolvedReduction:
    g_claim = np.asarray(reduced.g_claim, dtype=float)
    if reduced.trivial:
        payoff = np.zeros_like(g_claim)
        return SolvedReduction(reduced, payoff, None, backend.expect_p(g_claim * g_claim))

    market = backend.market(g_claim)
    if reduced.replicable:
        density = market.density
        mu = (reduced.g - market.expected_q) / math.fsum(market.q * density)
        payoff = g_claim + mu * density
        return SolvedReduction(reduced, payoff, mu, objective(market, payoff))

    v = dual_solve_discrete(market, reduced.g)
    payoff = theorem_payoff(market, v)
    return SolvedReduction(reduced, payoff, v, objective(market, payoff))


def _solve_gbm(reduced: ReducedProblem, backend: GbmBackend) -> SolvedReduction:
    projection: GbmProjection = reduced.g_claim
    claim, params, cfg = projection.claim, backend.params, backend.quad_cfg
    if reduced.trivial:
        second_moment = integrate_gaussian(
            lambda b: np.square(projection(b)), params.a1 * params.T, params.T, cfg
        )
        return SolvedReduction(reduced, None, None, second_moment, second_moment)

    if reduced.replicable:
        dual = gbm_model.replication_dual(claim, params, cfg, g=reduced.g)
    else:
        dual = gbm_model.solve_v(reduced.g, claim, params, cfg, backend.root_cfg)
    return SolvedReduction(
        reduced,
        None,
        dual,
        gbm_model.residual_risk(dual, claim, params, cfg),
        gbm_model.residual_risk_direct(dual, claim, params, cfg),
    )


def solve_reduced(reduced: ReducedProblem, backend: Backend) -> SolvedReduction:
    """Optimal payoff of min E(G - X)^2 s.t. E_Q X = g, X >= 0."""
    if isinstance(backend, DiscreteBackend):
        return _solve_discrete(reduced, backend)
    return _solve_gbm(reduced, backend)


def sandwich_bounds(problem: FullProblem, solved: SolvedReduction, backend: Backend) -> BoundsReport:
    """
    Bracket the observable objective E(H1 - W)^2.

    Under dominance the reduction is exact and lower = attained = upper.
    Otherwise the canonical problem is solved for the clipped claim H2 at the
    full floor budget, W* = H_tilde + X*, and

        lower    = E(H2 - W*)^2
        attained = E(H1 - W*)^2
        upper    = E(H1 1{H1 >= H_tilde} - W*)^2 - E(H1 1{H1 < H_tilde})^2
    """
    if isinstance(backend, GbmBackend):
        return BoundsReport(solved.value, solved.value, solved.value, clipped_used=False)

    h1 = project_claim(problem, backend)
    floor = backend.floor(problem.h_tilde)
    clipped = clip_claim(h1, floor)

    if clipped.dominance:
        wealth = floor + solved.payoff
        attained = backend.expect_p((h1 - wealth) ** 2)
        return BoundsReport(attained, attained, attained, clipped_used=False, terminal_wealth=wealth)

    full_floor = ReducedProblem(
        g=problem.x - backend.expect_q(floor),
        g_claim=clipped.h2 - floor,
        floor_strategy_capital=backend.expect_q(floor),
        dominance=True,
    )
    trivial = full_floor.g <= CAPITAL_TOL * max(1.0, abs(problem.x))
    full_floor = ReducedProblem(
        g=0.0 if trivial else full_floor.g,
        g_claim=full_floor.g_claim,
        floor_strategy_capital=full_floor.floor_strategy_capital,
        dominance=True,
        trivial=trivial,
        replicable=(not trivial) and full_floor.g >= backend.expect_q(full_floor.g_claim),
        floor_claim=floor,
    )
    wealth = floor + _solve_discrete(full_floor, backend).payoff
    kept = np.where(clipped.keep, h1, 0.0)
    dropped = np.where(clipped.keep, 0.0, h1)
    lower = backend.expect_p((clipped.h2 - wealth) ** 2)
    attained = backend.expect_p((h1 - wealth) ** 2)
    upper = backend.expect_p((kept - wealth) ** 2) - backend.expect_p(dropped ** 2)
    logger.info(f"Sandwich bounds: lower={lower:.9g}, attained={attained:.9g}, upper={upper:.9g}")
    return BoundsReport(lower, upper, attained, clipped_used=True, terminal_wealth=wealth)


def solve_full_problem(problem: FullProblem, backend: Backend) -> FullSolution:
    """Run the whole chain and report the projection gap plus the attained observable objective."""
    h1 = project_claim(problem, backend)
    floor = backend.floor(problem.h_tilde)
    clipped = clip_claim(h1, floor)
    reduced = split_superhedge(problem.x, clipped, floor, backend)
    solved = solve_reduced(reduced, backend)
    bounds = sandwich_bounds(problem, solved, backend)
    gap = backend.projection_gap(problem.h_claim, h1)
    floor_replication = backend.replicate(reduced.floor_claim) if floor is not None else None
    logger.info(
        f"Full problem ({backend.name}): g={reduced.g:.9g}, dominance={reduced.dominance}, "
        f"gap={gap:.9g}, objective={bounds.attained:.9g}"
    )
    return FullSolution(
        projection_gap=gap,
        reduced=reduced,
        solved=solved,
        bounds=bounds,
        total_objective=gap + bounds.attained,
        floor_replication=floor_replication,
    )
