"""
Discrete Oracle
Finite probability spaces in which the optimal constrained payoff can be
brute-forced: exact piecewise-linear dual solve, exhaustive active-set
quadratic program, and binomial-tree replication.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from src.utils.errors import ConfigurationError, OutOfRangeError, SizeLimitError

logger = logging.getLogger(__name__)

MAX_QP_ATOMS = 16
WEIGHT_SUM_TOL = 1e-12
FEASIBILITY_TOL = 1e-12
KKT_CHUNK = 4096


@dataclass(frozen=True)
class DiscreteMarket:
    """
    Finite market: physical weights p, martingale weights q and claim values G.

    Args:
        p: physical probabilities, positive, summing to one
        q: martingale-measure probabilities, positive, summing to one
        g_claim: claim values, nonnegative
    """

    p: np.ndarray
    q: np.ndarray
    g_claim: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ('p', 'q', 'g_claim'):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size == 0:
                raise ConfigurationError(f"{name} must be a nonempty vector")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} must be finite")
            arr.setflags(write=False)
            arrays[name] = arr
        if not arrays['p'].size == arrays['q'].size == arrays['g_claim'].size:
            raise ConfigurationError("p, q and G must have the same length")
        for name in ('p', 'q'):
            if np.any(arrays[name] <= 0):
                raise ConfigurationError(f"{name} must be strictly positive")
            if abs(math.fsum(arrays[name]) - 1.0) > WEIGHT_SUM_TOL:
                raise ConfigurationError(f"{name} must sum to 1, got {math.fsum(arrays[name])!r}")
        if np.any(arrays['g_claim'] < 0):
            raise ConfigurationError("claim values must be nonnegative")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.p.size

    @property
    def density(self) -> np.ndarray:
        """D_i = q_i / p_i."""
        return self.q / self.p

    @property
    def expected_q(self) -> float:
        return math.fsum(self.q * self.g_claim)

    def to_dict(self, g: Optional[float] = None) -> Dict:
        data = {'p': self.p.tolist(), 'q': self.q.tolist(), 'G': self.g_claim.tolist()}
        if g is not None:
            data['g'] = float(g)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> Tuple['DiscreteMarket', Optional[float]]:
        try:
            market = cls(data['p'], data['q'], data['G'])
        except KeyError as e:
            raise ConfigurationError(f"instance is missing key {e}")
        g = data.get('g')
        return market, (None if g is None else float(g))


def objective(market: DiscreteMarket, payoff: np.ndarray) -> float:
    """E_P (G - X)^2."""
    diff = market.g_claim - np.asarray(payoff, dtype=float)
    return math.fsum(market.p * diff * diff)


def dual_solve_discrete(market: DiscreteMarket, g: float) -> float:
    """
    Exact multiplier v < 0 with sum_i q_i (G_i + v D_i)^+ = g.

    The budget is piecewise linear in v with breakpoints at -G_i/D_i; atoms
    enter in decreasing order of G_i/D_i, equal ratios together.
    """
    total = market.expected_q
    if not 0.0 < g < total:
        raise OutOfRangeError(f"budget g={g!r} outside (0, E_Q G) = (0, {total!r})")

    density = market.density
    ratios = market.g_claim / density
    levels = np.unique(ratios)[::-1]
    levels = levels[levels > 0]
    for idx, level in enumerate(levels):
        active = ratios >= level
        claim_mass = math.fsum(market.q[active] * market.g_claim[active])
        density_mass = math.fsum(market.q[active] * density[active])
        next_level = levels[idx + 1] if idx + 1 < levels.size else 0.0
        # budget at v = -next_level, the right end of this linear piece
        if claim_mass - next_level * density_mass >= g:
            v = (g - claim_mass) / density_mass
            logger.debug(f"Discrete dual solved on piece {idx} of {levels.size}: v={v!r}")
            return v
    raise OutOfRangeError(f"budget g={g!r} not reached on any linear piece")


def theorem_payoff(market: DiscreteMarket, v: float) -> np.ndarray:
    """X_i = (G_i + v D_i)^+."""
    return np.maximum(market.g_claim + v * market.density, 0.0)


def active_set_qp(
    p: np.ndarray,
    q: np.ndarray,
    target: np.ndarray,
    budget: float,
) -> Tuple[np.ndarray, float]:
    """
    min sum_i p_i (target_i - X_i)^2 s.t. sum_i q_i X_i = budget, X >= 0,
    by solving the equality-constrained KKT system of every free set.

    Returns:
        Tuple of (optimal X, objective)
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    target = np.asarray(target, dtype=float)
    n = p.size
    if n > MAX_QP_ATOMS:
        raise SizeLimitError(f"exhaustive QP supports at most {MAX_QP_ATOMS} atoms, got {n}")

    idx = np.arange(n)
    masks = np.arange(1, 2 ** n, dtype=np.int64)
    best_x, best_obj = None, math.inf
    for start in range(0, masks.size, KKT_CHUNK):
        free = ((masks[start:start + KKT_CHUNK, None] >> idx) & 1).astype(bool)
        m = free.shape[0]
        kkt = np.zeros((m, n + 1, n + 1))
        rhs = np.zeros((m, n + 1))
        # Free atoms: 2 p_i X_i + q_i lam = 2 p_i t_i; fixed atoms: X_i = 0
        kkt[:, idx, idx] = np.where(free, 2.0 * p, 1.0)
        kkt[:, idx, n] = np.where(free, q, 0.0)
        kkt[:, n, idx] = q
        rhs[:, :n] = np.where(free, 2.0 * p * target, 0.0)
        rhs[:, n] = budget
        x = np.linalg.solve(kkt, rhs[..., None])[..., 0][:, :n]

        feasible = np.all(x >= -FEASIBILITY_TOL, axis=1)
        if not feasible.any():
            continue
        values = np.where(feasible, ((target - x) ** 2 * p).sum(axis=1), np.inf)
        k = int(np.argmin(values))
        if values[k] < best_obj:
            best_obj, best_x = float(values[k]), np.maximum(x[k], 0.0)

    if best_x is None:
        raise OutOfRangeError(f"no feasible payoff for budget {budget!r}")
    return best_x, best_obj


def qp_solve(market: DiscreteMarket, g: float) -> np.ndarray:
    """Optimal admissible payoff by exhaustive active-set enumeration."""
    total = market.expected_q
    if not 0.0 < g < total:
        raise OutOfRangeError(f"budget g={g!r} outside (0, E_Q G) = (0, {total!r})")
    payoff, _ = active_set_qp(market.p, market.q, market.g_claim, g)
    return payoff


def random_market(rng: np.random.Generator, n: int) -> Tuple[DiscreteMarket, float]:
    """Random instance: normalised uniform weights, G = 10 |N(0,1)|, g inside (0.05, 0.95) E_Q G."""
    p = rng.uniform(0.05, 1.0, n)
    q = rng.uniform(0.05, 1.0, n)
    g_claim = 10.0 * np.abs(rng.standard_normal(n))
    market = DiscreteMarket(p / p.sum(), q / q.sum(), g_claim)
    return market, float(rng.uniform(0.05, 0.95) * market.expected_q)


def save_instance(path: Union[str, Path], market: DiscreteMarket, g: float) -> Path:
    """Write a replay file {"p", "q", "G", "g"} with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(market.to_dict(g), indent=2) + '\n')
    return path


def load_instance(path: Union[str, Path]) -> Tuple[DiscreteMarket, float]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read instance {path}: {e}")
    market, g = DiscreteMarket.from_dict(data)
    if g is None:
        raise ConfigurationError(f"instance {path} has no budget 'g'")
    return market, g


@dataclass(frozen=True)
class BinomialTree:
    """Recombining tree with zero interest rate; nodes indexed by the number of up moves."""

    steps: int
    s0: float = 1.0
    up: float = 2.0
    down: float = 0.5

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")
        if not self.s0 > 0:
            raise ConfigurationError(f"s0 must be positive, got {self.s0}")
        if not 0 < self.down < 1 < self.up:
            raise ConfigurationError(f"need 0 < down < 1 < up, got down={self.down}, up={self.up}")

    @property
    def q_up(self) -> float:
        return (1.0 - self.down) / (self.up - self.down)

    def prices(self, step: int) -> np.ndarray:
        ups = np.arange(step + 1)
        return self.s0 * self.up ** ups * self.down ** (step - ups)

    def node_probabilities(self, p_up: float) -> np.ndarray:
        return stats.binom.pmf(np.arange(self.steps + 1), self.steps, p_up)


class Replication(NamedTuple):
    capital: float
    deltas: List[np.ndarray]   # deltas[k][j]: holding over (k, k+1) at node j
    values: List[np.ndarray]   # values[k][j]: wealth at node (k, j)


def replicate_binomial(
    tree: BinomialTree,
    payoff: Union[Sequence[float], np.ndarray, Callable[[np.ndarray], np.ndarray]],
) -> Replication:
    """
    Backward induction under q_up.

    Args:
        tree: the binomial market
        payoff: terminal values by number of up moves, or a function of the
            terminal prices

    Returns:
        Replication(capital, deltas, values) with capital = E_Q payoff
    """
    terminal_prices = tree.prices(tree.steps)
    terminal = payoff(terminal_prices) if callable(payoff) else payoff
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != terminal_prices.shape:
        raise ConfigurationError(f"payoff needs {terminal_prices.size} terminal values, got {terminal.size}")

    q_up = tree.q_up
    values: List[Optional[np.ndarray]] = [None] * (tree.steps + 1)
    deltas: List[Optional[np.ndarray]] = [None] * tree.steps
    values[tree.steps] = terminal
    for step in reversed(range(tree.steps)):
        up_values = values[step + 1][1:]
        down_values = values[step + 1][:-1]
        values[step] = q_up * up_values + (1.0 - q_up) * down_values
        deltas[step] = (up_values - down_values) / (tree.prices(step) * (tree.up - tree.down))
    return Replication(float(values[0][0]), deltas, values)


def path_wealth(tree: BinomialTree, replication: Replication, moves: Sequence[bool]) -> np.ndarray:
    """Self-financing wealth along one path (True = up move)."""
    if len(moves) != tree.steps:
        raise ValueError(f"path needs {tree.steps} moves, got {len(moves)}")
    wealth = np.empty(tree.steps + 1)
    wealth[0] = replication.capital
    node = 0
    for step, move in enumerate(moves):
        price = tree.prices(step)[node]
        next_price = price * (tree.up if move else tree.down)
        wealth[step + 1] = wealth[step] + replication.deltas[step][node] * (next_price - price)
        node += int(bool(move))
    return wealth


def induced_market(tree: BinomialTree, p_up: float, claim_values: Sequence[float]) -> DiscreteMarket:
    """Terminal-node market of a tree: binomial node weights under p_up and q_up."""
    if not 0 < p_up < 1:
        raise ConfigurationError(f"p_up must lie in (0, 1), got {p_up}")
    p = tree.node_probabilities(p_up)
    q = tree.node_probabilities(tree.q_up)
    return DiscreteMarket(p / p.sum(), q / q.sum(), claim_values)
