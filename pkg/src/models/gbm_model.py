"""
GBM Model
Closed-form machinery for the two-factor lognormal market: the traded asset
S_tilde is driven by the observable Wiener process W_tilde, the claim's
underlying S additionally by an independent W_hat, with correlation rho.

Notation used throughout:
    B_tilde_t = W_tilde_t + a1 t, the observable state (a Q-Wiener process)
    S_tilde_t = exp(B_tilde_t - t/2)
    f(x)      = E[H(S_T) | B_tilde_T = x], the observable projection of H
    h(x)      = f(x) exp(a1 x - a1^2 T / 2)
    c         = h^(-1)(-v), the exercise threshold of (G + v D_T)^+
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special

from src.utils.errors import (
    ConfigurationError,
    NoBracketError,
    NumericalError,
    OutOfRangeError,
    TimeAtExpiryError,
)
from src.utils.num_core import (
    DEFAULT_QUADRATURE,
    DEFAULT_ROOT,
    ArrayLike,
    QuadratureConfig,
    RootConfig,
    bivariate_norm_cdf,
    find_root_monotone,
    integrate_gaussian,
    log_norm_cdf,
    monotone_inverse,
    norm_cdf,
)

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
LOG_2PI = math.log(2.0 * math.pi)
EPSILON_TIME = 1e-9  # relative to T


@dataclass(frozen=True)
class GbmParams:
    """
    Market parameters.

    Args:
        T: horizon
        a: observable drift constant, a1 = a + 1/2
        rho: correlation between log S and the observable factor, in [0, 1)
        drift: piecewise-constant a(s) as ordered (start_time, value) pairs,
            the first starting at 0
    """

    T: float = 2.0
    a: float = 0.5
    rho: float = 0.3
    drift: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),)

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigurationError(f"T must be positive, got {self.T}", key='market.T')
        if not (math.isfinite(self.a) and self.a > 0):
            raise ConfigurationError(f"a must be positive, got {self.a}", key='market.a')
        if not 0.0 <= self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1), got {self.rho}", key='market.rho')
        try:
            pieces = tuple((float(t), float(value)) for t, value in self.drift)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"drift must be (time, value) pairs: {e}", key='market.drift')
        if not pieces or pieces[0][0] != 0.0:
            raise ConfigurationError("drift must start at time 0", key='market.drift')
        times = [t for t, _ in pieces]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])) or times[-1] >= self.T:
            raise ConfigurationError("drift breakpoints must increase strictly within [0, T)", key='market.drift')
        if not all(math.isfinite(value) for _, value in pieces):
            raise ConfigurationError("drift values must be finite", key='market.drift')
        object.__setattr__(self, 'drift', pieces)

    @property
    def a1(self) -> float:
        return self.a + 0.5

    @property
    def sigma_sq(self) -> float:
        """Conditional variance of log S_T given B_tilde_T."""
        return self.T * (1.0 - self.rho * self.rho)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)

    def drift_integral(self, t: Optional[ArrayLike] = None) -> ArrayLike:
        """Exact integral of a(s) over [0, t]."""
        t_arr = np.asarray(self.T if t is None else t, dtype=float)
        starts = np.array([s for s, _ in self.drift])
        values = np.array([v for _, v in self.drift])
        ends = np.append(starts[1:], np.inf)
        lengths = np.clip(t_arr[..., None] - starts, 0.0, ends - starts)
        total = lengths @ values
        return float(total) if np.ndim(total) == 0 else total

    @property
    def rho_A_T(self) -> float:
        """rho * A_T, finite also at rho = 0."""
        return self.drift_integral() - self.rho * self.a1 * self.T

    @property
    def A_T(self) -> float:
        return self.rho_A_T / self.rho if self.rho > 0 else math.nan

    def describe(self) -> Dict:
        return {
            'T': self.T,
            'a': self.a,
            'a1': self.a1,
            'rho': self.rho,
            'drift': [list(piece) for piece in self.drift],
            'rho_A_T': self.rho_A_T,
        }


@dataclass(frozen=True)
class CallClaim:
    """European call H(s) = (s - K)^+ with closed-form projection."""

    strike: float = 1.0
    name: str = 'call'

    def __post_init__(self):
        if not (math.isfinite(self.strike) and self.strike > 0):
            raise ConfigurationError(f"strike must be positive, got {self.strike}", key='claim.K')

    @property
    def kinks(self) -> Tuple[float, ...]:
        return (self.strike,)

    @property
    def scale(self) -> float:
        return self.strike

    def payoff(self, s: ArrayLike) -> np.ndarray:
        return np.maximum(np.asarray(s, dtype=float) - self.strike, 0.0)

    def alpha(self, params: GbmParams) -> float:
        return -math.log(self.strike) + params.rho_A_T + 0.5 * params.sigma_sq

    def beta(self, params: GbmParams) -> float:
        return math.sqrt(0.5 * params.sigma_sq)


@dataclass(frozen=True)
class GeneralClaim:
    """
    Claim H(S_T) given by a vectorised, nondecreasing, nonnegative payoff.

    kinks lists the prices where H has a kink or jump; quadratures split there.
    """

    payoff_fn: Callable[[np.ndarray], ArrayLike]
    kinks: Tuple[float, ...] = ()
    name: str = 'general'
    scale: float = 1.0

    def __post_init__(self):
        if any(not k > 0 for k in self.kinks):
            raise ConfigurationError(f"payoff kinks must be positive prices, got {self.kinks}", key='claim.payoff')
        object.__setattr__(self, 'kinks', tuple(sorted(float(k) for k in self.kinks)))

    def payoff(self, s: ArrayLike) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(np.asarray(self.payoff_fn(s), dtype=float), s.shape)


Claim = Union[CallClaim, GeneralClaim]


def named_claim(name: str, strike: float = 1.0, cap: float = 1.0) -> Claim:
    """
    Build one of the supported payoffs.

    'call' uses the closed forms; 'call_quadrature' is the same payoff routed
    through the general quadrature path.
    """
    if name == 'call':
        return CallClaim(strike)
    if not (math.isfinite(strike) and strike > 0):
        raise ConfigurationError(f"strike must be positive, got {strike}", key='claim.K')
    if name == 'call_quadrature':
        return GeneralClaim(lambda s: np.maximum(s - strike, 0.0), (strike,), name, scale=strike)
    if name == 'digital':
        return GeneralClaim(lambda s: (s >= strike).astype(float), (strike,), name)
    if name == 'bull_spread':
        if not cap > 0:
            raise ConfigurationError(f"cap must be positive, got {cap}", key='claim.cap')
        return GeneralClaim(lambda s: np.clip(s - strike, 0.0, cap), (strike, strike + cap), name, scale=cap)
    raise ConfigurationError(f"unknown payoff '{name}'", key='claim.payoff')


@dataclass(frozen=True)
class DualSolution:
    """Multiplier v(g) of the budget equation with solver diagnostics."""

    v: float
    g: float
    budget_residual: float
    h_inv_at_neg_v: float
    iterations: int

    @property
    def neg_v(self) -> float:
        return -self.v


@dataclass(frozen=True)
class StrategySample:
    """One row of a hedging strategy; s_tilde is always exp(b_tilde - t/2)."""

    t: float
    b_tilde: float
    s_tilde: float
    xi: float
    expiry: Optional[float] = None

    def __post_init__(self):
        if not self.t >= 0:
            raise ValueError(f"time must be nonnegative, got {self.t}")
        if self.expiry is not None and not self.t < self.expiry:
            raise TimeAtExpiryError(f"t={self.t} is not before expiry T={self.expiry}")
        expected = math.exp(self.b_tilde - 0.5 * self.t)
        if not math.isclose(self.s_tilde, expected, rel_tol=1e-12):
            raise ValueError(f"s_tilde={self.s_tilde} does not equal exp(b_tilde - t/2)={expected}")

    @classmethod
    def at(cls, t: float, b_tilde: float, xi: float, expiry: Optional[float] = None) -> 'StrategySample':
        return cls(t, b_tilde, math.exp(b_tilde - 0.5 * t), xi, expiry)


def _shaped(x: ArrayLike, values: np.ndarray) -> ArrayLike:
    if np.ndim(x) == 0:
        return float(np.reshape(values, -1)[0])
    return np.reshape(values, np.shape(x))


def _time_to_expiry(t: float, params: GbmParams) -> float:
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    tau = params.T - t
    if tau < EPSILON_TIME * params.T:
        raise TimeAtExpiryError(f"t={t} is within {EPSILON_TIME:g}*T of expiry T={params.T}")
    return tau


def density_D(w_T: ArrayLike, params: GbmParams) -> ArrayLike:
    """
    Density dQ/dP of the observable market, as a function of the physical
    Wiener value W_tilde_T = B_tilde_T - a1 T.
    """
    a1 = params.a1
    return np.exp(-a1 * np.asarray(w_T, dtype=float) - 0.5 * a1 * a1 * params.T)


def log_density_from_b(b_T: ArrayLike, params: GbmParams) -> ArrayLike:
    """log D_T expressed through B_tilde_T."""
    a1 = params.a1
    return -a1 * np.asarray(b_T, dtype=float) + 0.5 * a1 * a1 * params.T


def f_eval_call(x: ArrayLike, claim: CallClaim, params: GbmParams) -> ArrayLike:
    """Closed-form projection of the call; scaled-erfc form out of the money."""
    x_arr = np.asarray(x, dtype=float)
    sigma = params.sigma
    m = params.rho * x_arr + claim.alpha(params)
    d2 = m / sigma - 0.5 * sigma
    d1 = d2 + sigma
    with np.errstate(over='ignore', invalid='ignore', under='ignore'):
        direct = np.exp(m) * special.ndtr(d1) - special.ndtr(d2)
        # e^m Phi(d1) - Phi(d2) = exp(-d2^2/2)/2 * (erfcx(-d1/sqrt2) - erfcx(-d2/sqrt2))
        scaled = 0.5 * np.exp(-0.5 * d2 * d2) * (special.erfcx(-d1 / SQRT2) - special.erfcx(-d2 / SQRT2))
        value = np.where(d2 >= 0, direct, scaled)
    return _shaped(x, claim.strike * np.maximum(value, 0.0))


def _log_f_call(x: ArrayLike, claim: CallClaim, params: GbmParams) -> np.ndarray:
    x_arr = np.asarray(x, dtype=float)
    sigma = params.sigma
    m = params.rho * x_arr + claim.alpha(params)
    d2 = m / sigma - 0.5 * sigma
    d1 = d2 + sigma
    with np.errstate(over='ignore', invalid='ignore', under='ignore', divide='ignore'):
        log_direct = np.log(np.exp(m) * special.ndtr(d1) - special.ndtr(d2))
        log_scaled = (
            -math.log(2.0) - 0.5 * d2 * d2
            + np.log(special.erfcx(-d1 / SQRT2) - special.erfcx(-d2 / SQRT2))
        )
        value = np.where(d2 >= 0, log_direct, log_scaled)
    return math.log(claim.strike) + value


def f_eval(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> ArrayLike:
    """
    f(x) = E[H(S_T) | B_tilde_T = x] by quadrature over the conditional
    lognormal law, split at the payoff kinks.
    """
    x_arr = np.asarray(x, dtype=float)
    means = params.rho * x_arr.ravel() + params.rho_A_T
    kinks = [math.log(k) for k in claim.kinks]
    values = integrate_gaussian(
        lambda z: claim.payoff(np.exp(z)), means, params.sigma_sq, cfg, breakpoints=kinks
    )
    return _shaped(x, values)


def _f_values(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig) -> ArrayLike:
    if isinstance(claim, CallClaim):
        return f_eval_call(x, claim, params)
    return f_eval(x, claim, params, cfg)


def _log_f_values(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig) -> np.ndarray:
    if isinstance(claim, CallClaim):
        return _log_f_call(x, claim, params)
    with np.errstate(divide='ignore'):
        return np.log(np.asarray(f_eval(x, claim, params, cfg), dtype=float))


def f_prime_call(x: ArrayLike, claim: CallClaim, params: GbmParams) -> ArrayLike:
    """Three-term closed form of df/dx for the call."""
    x_arr = np.asarray(x, dtype=float)
    rho, sigma, strike = params.rho, params.sigma, claim.strike
    m = rho * x_arr + claim.alpha(params)
    d2 = m / sigma - 0.5 * sigma
    d1 = d2 + sigma
    with np.errstate(over='ignore', under='ignore'):
        first = rho * strike * np.exp(m + log_norm_cdf(d1))
        second = rho * strike / sigma * np.exp(m - 0.5 * d1 * d1 - 0.5 * LOG_2PI)
        third = rho * strike / sigma * np.exp(-0.5 * d2 * d2 - 0.5 * LOG_2PI)
    return _shaped(x, first + second - third)


def f_prime(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> ArrayLike:
    """
    df/dx. For the call the closed form; otherwise
    (rho / sigma^2) * (E[H(e^Z) Z] - mu E[H(e^Z)]), Z ~ N(mu, sigma^2).
    """
    x_arr = np.asarray(x, dtype=float)
    if params.rho == 0.0:
        return _shaped(x, np.zeros(x_arr.size))
    if isinstance(claim, CallClaim):
        return f_prime_call(x, claim, params)
    means = params.rho * x_arr.ravel() + params.rho_A_T
    kinks = [math.log(k) for k in claim.kinks]
    first_moment = integrate_gaussian(
        lambda z: claim.payoff(np.exp(z)) * z, means, params.sigma_sq, cfg, breakpoints=kinks
    )
    level = integrate_gaussian(
        lambda z: claim.payoff(np.exp(z)), means, params.sigma_sq, cfg, breakpoints=kinks
    )
    values = params.rho / params.sigma_sq * (first_moment - means * level)
    return _shaped(x, values)


def log_h(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> ArrayLike:
    a1 = params.a1
    values = _log_f_values(x, claim, params, cfg) + a1 * np.asarray(x, dtype=float) - 0.5 * a1 * a1 * params.T
    return _shaped(x, values)


def h_eval(x: ArrayLike, claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> ArrayLike:
    """h(x) = f(x) exp(a1 x - a1^2 T / 2), assembled in log space."""
    return _shaped(x, np.exp(np.asarray(log_h(x, claim, params, cfg))))


def h_inverse(
    y: float,
    claim: Claim,
    params: GbmParams,
    cfg: RootConfig = DEFAULT_ROOT,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> float:
    """inf{z: h(z) > y}, solved on log h."""
    if not y > 0:
        raise ValueError(f"h_inverse needs a positive level, got {y}")
    return monotone_inverse(lambda z: log_h(z, claim, params, quad_cfg), math.log(y), cfg)


def expected_claim_q(claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """E_Q of the projected claim, i.e. E[H(exp(Y + rho A_T))] with Y ~ N(0, T)."""
    shift = params.rho_A_T
    if isinstance(claim, CallClaim):
        root_t = math.sqrt(params.T)
        log_k = math.log(claim.strike)
        return (
            math.exp(shift + 0.5 * params.T) * norm_cdf((shift + params.T - log_k) / root_t)
            - claim.strike * norm_cdf((shift - log_k) / root_t)
        )
    kinks = [math.log(k) - shift for k in claim.kinks]
    return integrate_gaussian(lambda y: claim.payoff(np.exp(y + shift)), 0.0, params.T, cfg, breakpoints=kinks)


def budget(
    v: float,
    claim: Claim,
    params: GbmParams,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    root_cfg: RootConfig = DEFAULT_ROOT,
) -> float:
    """
    E_Q (G + v D_T)^+ through the threshold split:
    int_c^inf f(x) phi_T(x) dx + v exp(a1^2 T) Phi(-c/sqrt(T) - a1 sqrt(T)).
    """
    a1, T = params.a1, params.T
    if v >= 0:
        # No threshold: the positive part is the identity
        return expected_claim_q(claim, params, quad_cfg) + v * math.exp(a1 * a1 * T)
    c = h_inverse(-v, claim, params, root_cfg, quad_cfg)
    return _budget_at_threshold(v, c, claim, params, quad_cfg)


def _budget_at_threshold(v: float, c: float, claim: Claim, params: GbmParams, cfg: QuadratureConfig) -> float:
    a1, T = params.a1, params.T
    root_t = math.sqrt(T)
    first = integrate_gaussian(lambda x: _f_values(x, claim, params, cfg), 0.0, T, cfg, lower=c)
    tail = -math.exp(math.log(-v) + a1 * a1 * T + float(log_norm_cdf(-c / root_t - a1 * root_t)))
    return first + tail


def budget_direct(
    v: float,
    claim: Claim,
    params: GbmParams,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> float:
    """
    E_Q (G + v D_T)^+ by quadrature of the positive part itself; the kink is
    located with brentq, independently of the generalized inverse.
    """
    def payoff(b):
        return _f_values(b, claim, params, quad_cfg) + v * np.exp(log_density_from_b(b, params))

    if v >= 0:
        return integrate_gaussian(lambda b: np.maximum(payoff(b), 0.0), 0.0, params.T, quad_cfg)

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if payoff(lo) < 0:
            break
        lo *= 2.0
    for _ in range(200):
        if payoff(hi) > 0:
            break
        hi *= 2.0
    kink = optimize.brentq(lambda b: float(payoff(b)), lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return integrate_gaussian(
        lambda b: np.maximum(payoff(b), 0.0), 0.0, params.T, quad_cfg, breakpoints=(kink,)
    )


def solve_v(
    g: float,
    claim: Claim,
    params: GbmParams,
    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    root_cfg: RootConfig = DEFAULT_ROOT,
) -> DualSolution:
    """
    Solve E_Q (G + v D_T)^+ = g for the multiplier v < 0.

    Raises:
        OutOfRangeError: g outside (0, E_Q G)
        NoBracketError: the budget could not be bracketed
    """
    upper = expected_claim_q(claim, params, quad_cfg)
    if not 0.0 < g < upper:
        raise OutOfRangeError(f"budget g={g:.10g} outside (0, E_Q G) = (0, {upper:.10g})")

    try:
        v, evaluations = find_root_monotone(
            lambda v: budget(v, claim, params, quad_cfg, root_cfg),
            g,
            seed_bracket=(-1.0, 0.0),
            cfg=root_cfg,
            full_output=True,
        )
    except NoBracketError as e:
        # Lower end of the multiplier range is -ess sup G/D_T, unbounded for unbounded claims
        raise NoBracketError(f"multiplier not bracketed above r = -ess sup G/D_T: {e}") from e
    if not v < 0:
        raise NumericalError(f"solved multiplier is not negative: v={v:.6g}")

    c = h_inverse(-v, claim, params, root_cfg, quad_cfg)
    residual = _budget_at_threshold(v, c, claim, params, quad_cfg) - g
    logger.debug(f"solve_v: rho={params.rho}, g={g}, v={v:.10g}, threshold={c:.10g}, evaluations={evaluations}")
    return DualSolution(v=v, g=g, budget_residual=residual, h_inv_at_neg_v=c, iterations=evaluations)


def conditional_value(
    t: float,
    b_tilde: ArrayLike,
    dual: DualSolution,
    claim: Claim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> ArrayLike:
    """Wealth of the optimal strategy, E_Q[(G + v D_T)^+ | B_tilde_t = b]."""
    tau = _time_to_expiry(t, params)
    b = np.atleast_1d(np.asarray(b_tilde, dtype=float))
    a1, c, v = params.a1, dual.h_inv_at_neg_v, dual.v
    first = integrate_gaussian(lambda y: _f_values(y, claim, params, cfg), b, tau, cfg, lower=c)
    second = 0.0
    if v != 0:
        log_second = (
            math.log(abs(v)) + 0.5 * a1 * a1 * params.T - a1 * b + 0.5 * a1 * a1 * tau
            + log_norm_cdf((b - a1 * tau - c) / math.sqrt(tau))
        )
        second = math.copysign(1.0, v) * np.exp(log_second)
    return _shaped(b_tilde, first + second)


def _log_s_tilde(t: float, b: np.ndarray) -> np.ndarray:
    return b - 0.5 * t


def _tail_over_s(t: float, tau: float, b: np.ndarray, dual: DualSolution, params: GbmParams) -> np.ndarray:
    """-v a1 exp(-a1 b + a1^2 (T + tau)/2) Phi((b - c)/sqrt(tau) - a1 sqrt(tau)) / S_tilde_t."""
    if dual.v == 0:
        return np.zeros_like(b)
    a1, c = params.a1, dual.h_inv_at_neg_v
    root_tau = math.sqrt(tau)
    log_tail = (
        math.log(abs(dual.v)) + math.log(a1) + 0.5 * a1 * a1 * (params.T + tau) - a1 * b
        + log_norm_cdf((b - c) / root_tau - a1 * root_tau)
        - _log_s_tilde(t, b)
    )
    return -math.copysign(1.0, dual.v) * np.exp(log_tail)


def strategy_general(
    t: float,
    b_tilde: ArrayLike,
    dual: DualSolution,
    claim: Claim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> ArrayLike:
    """
    Optimal holding in S_tilde at (t, B_tilde_t = b):
    [E(f'(y) 1{y >= c}) - v a1 e^{...} Phi(...)] / S_tilde_t, y ~ N(b, T - t).
    """
    tau = _time_to_expiry(t, params)
    b = np.atleast_1d(np.asarray(b_tilde, dtype=float))
    integral = integrate_gaussian(
        lambda y: f_prime(y, claim, params, cfg), b, tau, cfg, lower=dual.h_inv_at_neg_v
    )
    with np.errstate(over='ignore', under='ignore'):
        xi = integral * np.exp(-_log_s_tilde(t, b)) + _tail_over_s(t, tau, b, dual, params)
    return _shaped(b_tilde, xi)


def _log_gaussian_exp_tail(p: float, q: float, r: float, mean: np.ndarray, var: float, lower: float) -> np.ndarray:
    """log E[exp(p y) phi(q y + r) 1{y >= lower}], y ~ N(mean, var)."""
    curvature = q * q + 1.0 / var
    slope = p - q * r + mean / var
    const = -0.5 * r * r - 0.5 * mean * mean / var
    with np.errstate(invalid='ignore'):
        upper_arg = (slope - curvature * lower) / math.sqrt(curvature)
    return (
        const + 0.5 * slope * slope / curvature
        + log_norm_cdf(upper_arg)
        - 0.5 * (LOG_2PI + math.log(var * curvature))
    )


def strategy_call(
    t: float,
    b_tilde: ArrayLike,
    dual: DualSolution,
    claim: CallClaim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    method: str = 'quadrature',
) -> ArrayLike:
    """
    Optimal strategy for the call from the split of E(f'(y) 1{y >= c}) into a
    Phi-weighted exponential integral and two Gaussian-exponential integrals,
    plus the threshold tail term.

    Args:
        method: 'quadrature' integrates the Phi-weighted term numerically;
            'bivariate' evaluates it through the bivariate normal distribution
            function and is fully vectorised (used by the Monte Carlo rollout)
    """
    if method not in ('quadrature', 'bivariate'):
        raise ValueError(f"unknown method '{method}'")
    tau = _time_to_expiry(t, params)
    b = np.atleast_1d(np.asarray(b_tilde, dtype=float))
    c = dual.h_inv_at_neg_v
    log_s = _log_s_tilde(t, b)
    tail = _tail_over_s(t, tau, b, dual, params)
    rho = params.rho
    if rho == 0.0:
        return _shaped(b_tilde, tail)

    strike, sigma, alpha = claim.strike, params.sigma, claim.alpha(params)
    q = rho / sigma
    r1 = alpha / sigma + 0.5 * sigma  # d1(y) = q y + r1
    r2 = r1 - sigma                   # d2(y) = q y + r2

    with np.errstate(over='ignore', under='ignore'):
        if method == 'quadrature':
            weighted = integrate_gaussian(
                lambda y: np.exp(rho * y + alpha + log_norm_cdf(q * y + r1)), b, tau, cfg, lower=c
            )
            first = rho * strike * weighted * np.exp(-log_s)
        else:
            shifted = b + rho * tau
            spread = math.sqrt(1.0 + q * q * tau)
            h = (q * shifted + r1) / spread
            k = np.full_like(b, np.inf) if math.isinf(c) else (shifted - c) / math.sqrt(tau)
            prob = bivariate_norm_cdf(h, k, q * math.sqrt(tau) / spread)
            first = rho * strike * np.exp(alpha + rho * b + 0.5 * rho * rho * tau - log_s) * prob

        log_scale = math.log(rho * strike / sigma)
        second = np.exp(log_scale + alpha + _log_gaussian_exp_tail(rho, q, r1, b, tau, c) - log_s)
        third = np.exp(log_scale + _log_gaussian_exp_tail(0.0, q, r2, b, tau, c) - log_s)
    return _shaped(b_tilde, first + second - third + tail)


def residual_risk(
    dual: DualSolution,
    claim: Claim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> float:
    """
    Tabulated two-term residual:
    int_{-inf}^{c} f^2(x + a1 T) phi_T(x) dx + v^2 e^{a1^2 T} Phi(-c/sqrt(T) - 2 a1).
    """
    a1, T, c, v = params.a1, params.T, dual.h_inv_at_neg_v, dual.v
    shift = a1 * T
    first = 0.0
    if c > -math.inf:
        first = integrate_gaussian(
            lambda x: np.square(_f_values(x + shift, claim, params, cfg)), 0.0, T, cfg, upper=c
        )
    second = 0.0
    if v != 0:
        second = math.exp(2.0 * math.log(abs(v)) + a1 * a1 * T + float(log_norm_cdf(-c / math.sqrt(T) - 2.0 * a1)))
    return first + second


def residual_risk_direct(
    dual: DualSolution,
    claim: Claim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
) -> float:
    """E_P (G - (G + v D_T)^+)^2 with B_tilde_T ~ N(a1 T, T) under P."""
    v, c = dual.v, dual.h_inv_at_neg_v

    def squared_shortfall(b):
        f = _f_values(b, claim, params, cfg)
        payoff = np.maximum(f + v * np.exp(log_density_from_b(b, params)), 0.0)
        return np.square(f - payoff)

    breakpoints = (c,) if math.isfinite(c) else ()
    return integrate_gaussian(squared_shortfall, params.a1 * params.T, params.T, cfg, breakpoints=breakpoints)


def projection_gap(claim: Claim, params: GbmParams, cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """E(G - G_tilde)^2 as one Gaussian integral of H^2 - f^2 under the physical law."""
    shift = params.rho_A_T + params.rho * params.a1 * params.T
    a1_t = params.a1 * params.T
    kinks = [math.log(k) - shift for k in claim.kinks]

    def difference(u):
        payoff = claim.payoff(np.exp(u + shift))
        projected = _f_values(u + a1_t, claim, params, cfg)
        return payoff * payoff - np.square(projected)

    gap = integrate_gaussian(difference, 0.0, params.T, cfg, breakpoints=kinks)
    return max(gap, 0.0)


def sensitivity_changes(g_values: Sequence[float], minima: Sequence[float]) -> List[float]:
    """Relative change of the minimum per unit budget between consecutive budgets."""
    return [
        (m1 - m0) / ((g1 - g0) * m0)
        for g0, g1, m0, m1 in zip(g_values, g_values[1:], minima, minima[1:])
    ]


def replication_dual(
    claim: Claim,
    params: GbmParams,
    cfg: QuadratureConfig = DEFAULT_QUADRATURE,
    g: Optional[float] = None,
) -> DualSolution:
    """
    Multiplier for budgets g >= E_Q G, where the constraint never binds and
    the optimal payoff is G + v D_T with v = (g - E_Q G) / E_Q D_T >= 0.
    At g = E_Q G (the default) the strategy is the replication delta.
    """
    upper = expected_claim_q(claim, params, cfg)
    g = upper if g is None else g
    if g < upper:
        raise OutOfRangeError(f"budget g={g:.10g} below E_Q G={upper:.10g}; use solve_v")
    v = (g - upper) / math.exp(params.a1 * params.a1 * params.T)
    return DualSolution(v=v, g=g, budget_residual=0.0, h_inv_at_neg_v=-math.inf, iterations=0)
