"""
Erlang Mixture Engine
Densities, distribution functions, quantiles and boxed moments of
mixtures of Gamma densities with integer shapes 1..n and a common scale
"""

import logging
import math
import sys
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.optimize import brentq
from scipy.special import gammaln, xlogy

from utils.errors import DomainError
from utils.summary_data import BinPartition

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
GAMMA_ACCURACY = 1e-16
GAMMA_MAX_ITER = 1000
QUANTILE_TOL = 1e-10
EPS = sys.float_info.epsilon


# ---------------------------------------------------------------------------
# Regularized incomplete gamma

def _gamma_series(x: float, alpha: float) -> float:
    """P(x, alpha) by the power series; accurate for x < alpha + 1"""
    if x == 0.0:
        return 0.0
    ap = alpha
    term = 1.0 / alpha
    total = term
    for _ in range(GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * GAMMA_ACCURACY:
            break
    else:
        logger.warning(f"incomplete gamma series did not converge (x={x}, alpha={alpha})")
    return total * math.exp(-x + alpha * math.log(x) - gammaln(alpha))


def _gamma_contfrac(x: float, alpha: float) -> float:
    """Q(x, alpha) = 1 - P(x, alpha) by Lentz's continued fraction; x >= alpha + 1"""
    tiny = EPS * 1e-290
    b = x + 1.0 - alpha
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, GAMMA_MAX_ITER + 1):
        an = -i * (i - alpha)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_ACCURACY:
            break
    else:
        logger.warning(f"incomplete gamma fraction did not converge (x={x}, alpha={alpha})")
    return math.exp(-x + alpha * math.log(x) - gammaln(alpha)) * h


def reg_lower_inc_gamma(x: float, alpha: float) -> float:
    """
    Regularized lower incomplete gamma P(x, alpha) = Gamma(alpha)^-1 int_0^x t^(alpha-1) e^-t dt

    Args:
        x: Upper integration limit, x >= 0 (+inf allowed)
        alpha: Shape, alpha > 0

    Returns:
        Probability in [0, 1]
    """
    if not alpha > 0:
        raise DomainError(f"incomplete gamma needs alpha > 0, got {alpha}")
    if not x >= 0:
        raise DomainError(f"incomplete gamma needs x >= 0, got {x}")
    if math.isinf(x):
        return 1.0
    if x < alpha + 1.0:
        return min(1.0, _gamma_series(x, alpha))
    return max(0.0, 1.0 - _gamma_contfrac(x, alpha))


def inc_gamma_ladder(x: float, alpha0: float, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    P(x, alpha0 + j) and Q(x, alpha0 + j) for j = 0..m-1

    Uses the shape recurrence P(x, a+1) = P(x, a) - x^a e^-x / Gamma(a+1),
    run downward for P and upward for Q so that every step adds positive
    terms; each entry takes whichever of P, Q is the smaller directly.
    """
    if math.isinf(x):
        return np.ones(m), np.zeros(m)
    if x == 0.0:
        return np.zeros(m), np.ones(m)

    alphas = alpha0 + np.arange(m, dtype=float)
    # t_j = x^a e^-x / Gamma(a + 1) with a = alpha0 + j
    t = np.exp(alphas * math.log(x) - x - gammaln(alphas + 1.0))

    top = alphas[-1]
    p_top = _gamma_series(x, top) if x < top + 1.0 else 1.0 - _gamma_contfrac(x, top)
    # P(a_j) = P(a_top) + sum_{l=j}^{m-2} t_l
    tail_sums = np.concatenate([np.cumsum(t[:-1][::-1])[::-1], [0.0]])
    p_down = p_top + tail_sums

    q_bottom = _gamma_contfrac(x, alpha0) if x >= alpha0 + 1.0 else 1.0 - _gamma_series(x, alpha0)
    # Q(a_j) = Q(a_0) + sum_{l=0}^{j-1} t_l
    q_up = q_bottom + np.concatenate([[0.0], np.cumsum(t[:-1])])

    use_p = p_down <= 0.5
    P = np.clip(np.where(use_p, p_down, 1.0 - q_up), 0.0, 1.0)
    Q = np.clip(np.where(use_p, 1.0 - p_down, q_up), 0.0, 1.0)
    return P, Q


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class ErlangMixture:
    """
    MixedErlang(weights, scale): weights over shapes 1..n, common scale theta
    """
    weights: np.ndarray
    scale: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        theta = float(self.scale)
        if w.size < 1:
            raise DomainError("a mixture needs at least one shape")
        if not (math.isfinite(theta) and theta > 0):
            raise DomainError(f"scale must be finite and > 0, got {theta}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise DomainError(f"weights sum to {w.sum()!r}, not 1")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "scale", theta)

    @classmethod
    def from_raw(cls, raw: Sequence[float], scale: float) -> "ErlangMixture":
        """Renormalize nonnegative raw weights into a mixture"""
        raw = np.asarray(raw, dtype=float)
        total = raw.sum()
        if not total > 0:
            raise DomainError("raw weights carry no mass")
        return cls(raw / total, scale)

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def shapes(self) -> np.ndarray:
        return np.arange(1, self.n + 1, dtype=float)

    def mean(self) -> float:
        return float(self.scale * np.dot(self.weights, self.shapes))


@dataclass(frozen=True)
class MomentTriplet:
    """
    Model-implied sufficient statistics: pi_j, mu_{j,k} for k = 1..k_j,
    and Sigma over the flattened (j, k) index
    """
    pi: np.ndarray
    mu: Tuple[np.ndarray, ...]
    sigma: np.ndarray

    def mu_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(m, dtype=float) for m in self.mu]) if self.mu else np.zeros(0)


# ---------------------------------------------------------------------------
# Boxed moments

def _log_rising(shapes: np.ndarray, max_order: int) -> np.ndarray:
    """log Gamma(i+k)/Gamma(i) for k = 0..max_order, via the recursion on k"""
    steps = np.log(shapes[:, None] + np.arange(max_order, dtype=float)[None, :])
    return np.concatenate([np.zeros((shapes.size, 1)), np.cumsum(steps, axis=1)], axis=1)


def boxed_moment_table(scale: float, edges: Sequence[float], max_order: int,
                       n_shapes: int) -> np.ndarray:
    """
    Per-component boxed moments E[Y_i^k 1{Y_i in [b_{j-1}, b_j)}] for
    Y_i ~ Gamma(i, scale)

    Args:
        scale: Common scale theta
        edges: Bin edges b_0 < ... < b_J (last may be inf)
        max_order: Highest moment order k
        n_shapes: Shapes 1..n_shapes

    Returns:
        Array of shape (n_shapes, J, max_order + 1)
    """
    edges = np.asarray(edges, dtype=float)
    J = edges.size - 1
    m = n_shapes + max_order
    P = np.empty((edges.size, m))
    Q = np.empty((edges.size, m))
    for e, b in enumerate(edges):
        P[e], Q[e] = inc_gamma_ladder(b / scale, 1.0, m)

    # Mass of Gamma(a) in each bin, a = 1..m; difference of the smaller tail
    use_lower = P[1:] <= 0.5
    mass = np.where(use_lower, P[1:] - P[:-1], Q[:-1] - Q[1:])
    mass = np.clip(mass, 0.0, None)  # (J, m)

    shapes = np.arange(1, n_shapes + 1, dtype=float)
    orders = np.arange(max_order + 1)
    log_factor = _log_rising(shapes, max_order) + orders[None, :] * math.log(scale)
    factor = np.exp(log_factor)  # (n, K+1)

    # table[i, j, k] = factor[i, k] * mass[j, i + k]
    idx = (np.arange(n_shapes)[:, None] + orders[None, :])  # (n, K+1)
    table = factor[:, None, :] * mass[:, idx].transpose(1, 0, 2)
    return table


def boxed_moment(mix: ErlangMixture, a: float, b: float, k: int) -> float:
    """
    E[X^k 1{a <= X < b}] for X ~ MixedErlang(weights, scale)
    """
    if not (a >= 0) or not (b > a):
        raise DomainError(f"boxed moment needs 0 <= a < b, got [{a}, {b})")
    if k < 0 or int(k) != k:
        raise DomainError(f"moment order must be a nonnegative integer, got {k}")
    table = boxed_moment_table(mix.scale, [a, b], int(k), mix.n)
    return float(np.dot(mix.weights, table[:, 0, int(k)]))


def triplet_from_moments(mu_full: np.ndarray, k: Sequence[int]) -> MomentTriplet:
    """
    Assemble (pi, mu, Sigma) from per-bin raw moments mu_full[j, o], o = 0..2K
    """
    k = [int(kj) for kj in k]
    pi = mu_full[:, 0].copy()
    mu = tuple(mu_full[j, 1:kj + 1].copy() for j, kj in enumerate(k))
    index = [(j, kk) for j, kj in enumerate(k) for kk in range(1, kj + 1)]
    d = len(index)
    sigma = np.zeros((d, d))
    if d:
        bins = np.array([j for j, _ in index])
        orders = np.array([kk for _, kk in index])
        mu_flat = mu_full[bins, orders]
        same_bin = bins[:, None] == bins[None, :]
        block = mu_full[bins[:, None], orders[:, None] + orders[None, :]]
        sigma = np.where(same_bin, block, 0.0) - np.outer(mu_flat, mu_flat)
        sigma = 0.5 * (sigma + sigma.T)
    return MomentTriplet(pi=pi, mu=mu, sigma=sigma)


def model_triplet(mix: ErlangMixture, partition: BinPartition,
                  k: Sequence[int]) -> MomentTriplet:
    """
    Model-implied (pi, mu, Sigma) on a partition with k_j moments per bin
    """
    k = [int(kj) for kj in k]
    if len(k) != partition.n_bins:
        raise DomainError(f"k has {len(k)} entries for {partition.n_bins} bins")
    if any(kj < 0 for kj in k):
        raise DomainError(f"moment counts must be >= 0, got {k}")
    max_order = 2 * max(k)
    table = boxed_moment_table(mix.scale, partition.edges, max_order, mix.n)
    mu_full = np.einsum("i,ijo->jo", mix.weights, table)
    return triplet_from_moments(mu_full, k)


# ---------------------------------------------------------------------------
# Distribution functions

def pdf(mix: ErlangMixture, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Mixture density at x >= 0"""
    scalar = np.isscalar(x)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise DomainError("density is defined for x >= 0")
    theta = mix.scale
    shapes = mix.shapes
    z = x[:, None] / theta
    log_comp = xlogy(shapes[None, :] - 1.0, z) - z - gammaln(shapes)[None, :] - math.log(theta)
    values = np.exp(log_comp) @ mix.weights
    return float(values[0]) if scalar else values


def cdf(mix: ErlangMixture, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Mixture distribution function sum_i w_i P(x / theta, i)"""
    scalar = np.isscalar(x)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise DomainError("distribution function is defined for x >= 0")
    values = np.empty(x.size)
    for i, xi in enumerate(x):
        P, _ = inc_gamma_ladder(xi / mix.scale, 1.0, mix.n)
        values[i] = min(1.0, float(np.dot(mix.weights, P)))
    return float(values[0]) if scalar else values


def sf(mix: ErlangMixture, x: float) -> float:
    """Survival function 1 - cdf, computed from the upper tails"""
    _, Q = inc_gamma_ladder(float(x) / mix.scale, 1.0, mix.n)
    return float(np.dot(mix.weights, Q))


def quantile(mix: ErlangMixture, p: float) -> float:
    """
    x with cdf(x) = p, by a bracketed root solve

    Args:
        mix: Erlang mixture
        p: Probability in (0, 1)

    Returns:
        Quantile at level p
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    n = mix.n
    hi = mix.scale * (n + 10.0 * math.sqrt(n) + 20.0 / (1.0 - p))
    for _ in range(200):
        if cdf(mix, hi) >= p:
            break
        hi *= 2.0
    else:
        raise DomainError(f"could not bracket the quantile at level {p}")

    # Upper quantiles are solved on the survival scale to keep resolution
    if p > 0.5:
        target = 1.0 - p
        root = brentq(lambda x: target - sf(mix, x), 0.0, hi, xtol=1e-300, rtol=4 * EPS, maxiter=500)
    else:
        root = brentq(lambda x: cdf(mix, x) - p, 0.0, hi, xtol=1e-300, rtol=4 * EPS, maxiter=500)
    return float(root)


def quantiles(mix: ErlangMixture, probs: Sequence[float]) -> np.ndarray:
    return np.array([quantile(mix, p) for p in probs])


def var_tvar(mix: ErlangMixture, level: float) -> Tuple[float, float]:
    """
    Value-at-Risk and Tail Value-at-Risk at a level in (0, 1)
    """
    var = quantile(mix, level)
    tail = boxed_moment(mix, var, math.inf, 1)
    return var, tail / (1.0 - level)


def tijms_weights(target_cdf: Callable[[float], float], theta: float, n: int) -> ErlangMixture:
    """
    Discretize a distribution function: w_i = F(i theta) - F((i-1) theta),
    renormalized over i = 1..n
    """
    if not theta > 0:
        raise DomainError(f"theta must be > 0, got {theta}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    grid = theta * np.arange(n + 1, dtype=float)
    F = np.array([float(target_cdf(x)) for x in grid])
    raw = np.clip(np.diff(F), 0.0, None)
    if not raw.sum() > 0:
        raise DomainError(f"no mass of the target falls in [0, {grid[-1]}]")
    return ErlangMixture.from_raw(raw, theta)


def sample(mix: ErlangMixture, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. observations: a shape from the weights, then a Gamma draw"""
    shapes = rng.choice(mix.n, size=size, p=mix.weights) + 1
    return rng.gamma(shapes, mix.scale)


# ---------------------------------------------------------------------------
# Mixture JSON

class MixtureFile(BaseModel):
    """Mixture JSON: {"theta": number, "weights": [number, ...]}"""
    model_config = ConfigDict(extra="forbid")

    theta: float
    weights: List[float]

    @field_validator("weights")
    @classmethod
    def _nonnegative(cls, v: List[float]) -> List[float]:
        if not v or any(w < 0 for w in v):
            raise ValueError("weights must be a nonempty list of nonnegative numbers")
        return v


def mixture_to_dict(mix: ErlangMixture) -> dict:
    return MixtureFile(theta=mix.scale, weights=mix.weights.tolist()).model_dump()


def mixture_from_dict(data: dict, renormalize: bool = False) -> ErlangMixture:
    record = MixtureFile.model_validate(data)
    if renormalize:
        return ErlangMixture.from_raw(record.weights, record.theta)
    return ErlangMixture(np.asarray(record.weights), record.theta)
