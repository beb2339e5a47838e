"""
Numerical Core
Standard normal functions, Gaussian expectations, monotone root finding and
the generalized inverse of a nondecreasing function.

Everything here is a pure function of its arguments; the cached quadrature
rules are read-only arrays.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.utils.errors import (
    ConfigurationError,
    MaxIterError,
    NoBracketError,
    NonFiniteError,
    UnboundedError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

SQRT_2PI = math.sqrt(2.0 * math.pi)
LEGENDRE_ORDER = 16
INITIAL_PANELS = 8
# Upper bound on (means x nodes) evaluated in one density block
DENSITY_BLOCK = 4_000_000
ZERO_NUDGE = 1e-12


@dataclass(frozen=True)
class QuadratureConfig:
    """
    Settings for Gaussian expectations.

    Args:
        nodes: Gauss-Hermite node count for smooth integrands.
        truncation_sd: half-width, in standard deviations, of the window used
            by the panel fallback.
        abs_tol: tolerance between successive panel refinements.
        max_panels: refinement stops (with a warning) beyond this panel count.
    """

    nodes: int = 128
    truncation_sd: float = 10.0
    abs_tol: float = 1e-10
    max_panels: int = 4096

    def __post_init__(self):
        if int(self.nodes) != self.nodes or self.nodes < 8:
            raise ConfigurationError(f"quad.nodes must be an integer >= 8, got {self.nodes}", key='quad.nodes')
        if not self.truncation_sd >= 6:
            raise ConfigurationError(
                f"quad.truncation_sd must be >= 6, got {self.truncation_sd}", key='quad.truncation_sd'
            )
        if not self.abs_tol > 0:
            raise ConfigurationError(f"quad.abs_tol must be positive, got {self.abs_tol}", key='quad.abs_tol')
        if self.max_panels < 2 * INITIAL_PANELS:
            raise ConfigurationError(
                f"quad.max_panels must be >= {2 * INITIAL_PANELS}, got {self.max_panels}", key='quad.max_panels'
            )


@dataclass(frozen=True)
class RootConfig:
    """Tolerances and limits for bracketing and bisection."""

    abs_tol: float = 1e-10
    x_tol: float = 1e-12
    max_iter: int = 200
    bracket_growth: float = 2.0

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ConfigurationError(f"root.abs_tol must be positive, got {self.abs_tol}", key='root.abs_tol')
        if not self.x_tol > 0:
            raise ConfigurationError(f"root.x_tol must be positive, got {self.x_tol}", key='root.x_tol')
        if int(self.max_iter) != self.max_iter or self.max_iter < 50:
            raise ConfigurationError(f"root.max_iter must be an integer >= 50, got {self.max_iter}", key='root.max_iter')
        if not self.bracket_growth > 1:
            raise ConfigurationError(
                f"root.bracket_growth must exceed 1, got {self.bracket_growth}", key='root.bracket_growth'
            )


DEFAULT_QUADRATURE = QuadratureConfig()
DEFAULT_ROOT = RootConfig()


def norm_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal distribution function; saturates to 0 and 1 in the tails."""
    return special.ndtr(x)


def log_norm_cdf(x: ArrayLike) -> ArrayLike:
    return special.log_ndtr(x)


def norm_ppf(u: ArrayLike) -> ArrayLike:
    return special.ndtri(u)


def bivariate_norm_cdf(h: ArrayLike, k: ArrayLike, rho: float) -> np.ndarray:
    """
    P(X <= h, Y <= k) for standard normals with correlation rho, via Owen's T.

    Args:
        h, k: upper limits (broadcast against each other, infinities allowed)
        rho: correlation in (-1, 1)

    Returns:
        Array of probabilities with the broadcast shape of h and k
    """
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    r = math.sqrt(1.0 - rho * rho)

    # Marginal limits where either argument is infinite
    edge = np.where(
        np.isneginf(h) | np.isneginf(k),
        0.0,
        np.where(np.isposinf(h), special.ndtr(k), special.ndtr(h)),
    )
    finite = np.isfinite(h) & np.isfinite(k)
    hf = np.where(finite, h, 1.0)
    kf = np.where(finite, k, 1.0)
    # Owen's T formula is singular at exact zeros
    hf = np.where(hf == 0.0, ZERO_NUDGE, hf)
    kf = np.where(kf == 0.0, ZERO_NUDGE, kf)

    a_h = (kf - rho * hf) / (hf * r)
    a_k = (hf - rho * kf) / (kf * r)
    beta = np.where(hf * kf > 0, 0.0, 0.5)
    inner = 0.5 * (special.ndtr(hf) + special.ndtr(kf)) - special.owens_t(hf, a_h) - special.owens_t(kf, a_k) - beta
    return np.clip(np.where(finite, inner, edge), 0.0, 1.0)


@lru_cache(maxsize=16)
def hermite_rule(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes with weights normalised to sum to one."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / SQRT_2PI
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


@lru_cache(maxsize=4)
def legendre_rule(order: int = LEGENDRE_ORDER) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _evaluate(fn: Callable, points: np.ndarray, scheme: str) -> np.ndarray:
    values = np.asarray(fn(points), dtype=float)
    values = np.broadcast_to(values, points.shape)
    if not np.all(np.isfinite(values)):
        bad = points[~np.isfinite(values)]
        raise NonFiniteError(f"{scheme}: integrand not finite at {bad.size} node(s), first at z={bad.flat[0]:.6g}")
    return values


def _composite_nodes(cuts: Sequence[float], panels_per_segment: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened Gauss-Legendre nodes and weights over equal panels of each segment."""
    x_ref, w_ref = legendre_rule()
    edges = [np.linspace(a, b, panels_per_segment + 1) for a, b in zip(cuts[:-1], cuts[1:])]
    left = np.concatenate([e[:-1] for e in edges])
    right = np.concatenate([e[1:] for e in edges])
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    nodes = (mid[:, None] + half[:, None] * x_ref[None, :]).ravel()
    weights = (half[:, None] * w_ref[None, :]).ravel()
    return nodes, weights


def _density_weighted_sum(means: np.ndarray, sd: float, nodes: np.ndarray, weighted: np.ndarray) -> np.ndarray:
    out = np.empty(means.shape[0])
    block = max(1, DENSITY_BLOCK // max(1, nodes.size))
    for start in range(0, means.shape[0], block):
        m = means[start:start + block]
        z = (nodes[None, :] - m[:, None]) / sd
        out[start:start + block] = np.exp(-0.5 * z * z) @ weighted
    return out / (sd * SQRT_2PI)


def _panel_expectation(
    fn: Callable,
    means: np.ndarray,
    sd: float,
    cfg: QuadratureConfig,
    breakpoints: Sequence[float],
    lower: float,
    upper: float,
) -> np.ndarray:
    lo = max(lower, float(means.min()) - cfg.truncation_sd * sd)
    hi = min(upper, float(means.max()) + cfg.truncation_sd * sd)
    if not lo < hi:
        return np.zeros(means.shape[0])
    cuts = sorted({lo, hi, *(float(b) for b in breakpoints if lo < b < hi)})
    segments = len(cuts) - 1

    def estimate(panels: int) -> np.ndarray:
        nodes, weights = _composite_nodes(cuts, panels)
        values = _evaluate(fn, nodes, 'Gauss-Legendre panels')
        return _density_weighted_sum(means, sd, nodes, weights * values)

    panels = INITIAL_PANELS
    previous = estimate(panels)
    while True:
        if 2 * panels * segments > cfg.max_panels:
            logger.warning(
                f"Panel quadrature not converged at {panels * segments} panels on [{lo:.6g}, {hi:.6g}]"
            )
            return previous
        panels *= 2
        current = estimate(panels)
        if np.all(np.abs(current - previous) <= np.maximum(cfg.abs_tol, 1e-13 * np.abs(current))):
            logger.debug(f"Panel quadrature converged with {panels * segments} panels")
            return current
        previous = current


def integrate_gaussian(
    fn: Callable[[np.ndarray], ArrayLike],
    mean: ArrayLike,
    variance: float,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    breakpoints: Sequence[float] = (),
    lower: float = -math.inf,
    upper: float = math.inf,
) -> ArrayLike:
    """
    E[fn(Z) 1{lower <= Z <= upper}] for Z ~ N(mean, variance).

    Smooth integrands over the whole line use Gauss-Hermite. Any breakpoint or
    finite limit switches to adaptive composite Gauss-Legendre panels over
    mean +/- truncation_sd standard deviations, split at the breakpoints so
    that kinks and indicator edges sit on panel boundaries.

    Args:
        fn: vectorised integrand; must accept arrays of any shape
        mean: scalar or 1-D array of means (one expectation per mean)
        variance: common variance, positive
        cfg: quadrature settings
        breakpoints: points where fn has kinks or jumps
        lower, upper: integration limits

    Returns:
        float for scalar mean, otherwise an array matching mean
    """
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    means = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = math.sqrt(variance)

    if not breakpoints and math.isinf(lower) and lower < 0 and math.isinf(upper) and upper > 0:
        z, w = hermite_rule(cfg.nodes)
        points = means[:, None] + sd * z[None, :]
        result = _evaluate(fn, points, 'Gauss-Hermite') @ w
    else:
        result = _panel_expectation(fn, means, sd, cfg, breakpoints, lower, upper)

    if np.ndim(mean) == 0:
        return float(result[0])
    return result


def _checked(fn: Callable[[float], float], x: float) -> float:
    value = float(fn(x))
    if math.isnan(value):
        raise NonFiniteError(f"function returned NaN at x={x:.17g}")
    return value


def find_root_monotone(
    fn: Callable[[float], float],
    target: float,
    seed_bracket: Tuple[float, float] = (-1.0, 1.0),
    cfg: RootConfig = DEFAULT_ROOT,
    full_output: bool = False,
) -> Union[float, Tuple[float, int]]:
    """
    Solve fn(x) = target for nondecreasing fn by bracket growth and bisection.

    Args:
        fn: nondecreasing scalar function
        target: level to hit
        seed_bracket: starting bracket, expanded geometrically until it
            contains a sign change
        cfg: tolerances and iteration limits
        full_output: also return the number of function evaluations

    Returns:
        The root, or (root, evaluations) when full_output is set
    """
    lo, hi = sorted(float(b) for b in seed_bracket)
    if not lo < hi:
        raise ValueError(f"seed bracket must have positive width, got {seed_bracket}")
    f_lo = _checked(fn, lo) - target
    f_hi = _checked(fn, hi) - target
    evaluations = 2
    width = hi - lo

    expansions = 0
    while f_lo > 0 or f_hi < 0:
        if expansions >= cfg.max_iter:
            raise NoBracketError(
                f"no sign change for target {target:.10g} after {expansions} expansions, bracket [{lo:.6g}, {hi:.6g}]"
            )
        width *= cfg.bracket_growth
        if f_lo > 0:
            hi, f_hi = lo, f_lo
            lo -= width
            f_lo = _checked(fn, lo) - target
        else:
            lo, f_lo = hi, f_hi
            hi += width
            f_hi = _checked(fn, hi) - target
        evaluations += 1
        expansions += 1
        logger.debug(f"Bracket grown to [{lo:.6g}, {hi:.6g}]")

    def done(root: float):
        return (root, evaluations) if full_output else root

    if abs(f_lo) <= cfg.abs_tol:
        return done(lo)
    if abs(f_hi) <= cfg.abs_tol:
        return done(hi)

    for _ in range(cfg.max_iter):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            return done(mid)
        f_mid = _checked(fn, mid) - target
        evaluations += 1
        if abs(f_mid) <= cfg.abs_tol:
            return done(mid)
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= cfg.x_tol:
            return done(0.5 * (lo + hi))
    raise MaxIterError(f"bisection did not reach tolerance in {cfg.max_iter} steps, bracket [{lo:.17g}, {hi:.17g}]")


def monotone_inverse(
    fn: Callable[[float], float],
    y: float,
    cfg: RootConfig = DEFAULT_ROOT,
    seed_bracket: Tuple[float, float] = (-1.0, 1.0),
) -> float:
    """
    Generalized inverse inf{z: fn(z) > y} of a nondecreasing function.

    Flat runs at level y resolve to their right end. Returns -inf when fn
    stays above y over the whole reachable lower range.

    Raises:
        UnboundedError: fn never exceeds y within max_iter bracket expansions
    """
    lo, hi = sorted(float(b) for b in seed_bracket)
    width = hi - lo

    steps = 0
    while not _checked(fn, hi) > y:
        if steps >= cfg.max_iter:
            raise UnboundedError(f"level {y:.10g} is not exceeded anywhere up to z={hi:.6g}")
        lo = hi
        width *= cfg.bracket_growth
        hi += width
        steps += 1

    steps = 0
    while _checked(fn, lo) > y:
        if steps >= cfg.max_iter:
            return -math.inf
        hi = lo
        width *= cfg.bracket_growth
        lo -= width
        steps += 1

    # Invariant: fn(lo) <= y < fn(hi)
    for _ in range(cfg.max_iter):
        if hi - lo <= cfg.x_tol:
            return hi
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            return hi
        if _checked(fn, mid) > y:
            hi = mid
        else:
            lo = mid
    raise MaxIterError(f"generalized inverse did not converge, bracket [{lo:.17g}, {hi:.17g}]")
