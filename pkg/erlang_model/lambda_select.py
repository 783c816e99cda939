"""
Penalty hyperparameter selection
Laplace-approximated marginal likelihood of lambda: eigenvalues of the
penalty relative to the Hessian, effective dimension, score and update
"""

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, eigvalsh, solve_triangular
from scipy.optimize import brentq

sys.path.append(str(Path(__file__).parent.parent))
from config import Config
from erlang_model.penalty import PenaltyBundle
from utils.errors import DomainError, PoleError, SingularHessianError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
FIXED_POINT_MAX_ITER = 500
ROOT_RTOL = 1e-12


@dataclass(frozen=True)
class HessianBundle:
    """
    Data-only Hessian H = -d^2 l(omega, theta, 0) with the eigenvalues
    eta of -H^-1 P and tau = -eta clipped at zero
    """
    H: np.ndarray
    P: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    clipped: int = 0
    jitter: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LambdaUpdate:
    """Result of one lambda update"""
    value: float
    clamped: Optional[str] = None
    iterations: int = 0
    method: str = "fixed-point"


def _cholesky_jittered(H: np.ndarray) -> np.ndarray:
    d = H.shape[0]
    scale = float(np.mean(np.abs(np.diag(H)))) or 1.0
    for level in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            return cholesky(H + level * scale * np.eye(d), lower=True)
        except LinAlgError:
            continue
    raise LinAlgError("Hessian is not positive definite")


def penalty_eigenvalues(H: np.ndarray, P: np.ndarray) -> np.ndarray:
    """
    Eigenvalues of -H^-1 P, ascending

    With H = L L' they are those of the symmetric -L^-1 P L^-T and
    therefore real.

    Raises:
        SingularHessianError: if H is not positive definite even after jitter
    """
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    P = np.asarray(P, dtype=float)
    try:
        L = _cholesky_jittered(H)
    except LinAlgError as e:
        raise SingularHessianError(f"Hessian is not positive definite even after jitter: {e}") from e
    left = solve_triangular(L, P, lower=True)
    M = solve_triangular(L, left.T, lower=True)
    return np.sort(eigvalsh(-0.5 * (M + M.T)))


def hessian_bundle(H: np.ndarray, P: np.ndarray, jitter: float = 0.0) -> HessianBundle:
    """Eigen-decompose P against a positive definite H; roundoff below zero in tau is clipped"""
    eta = penalty_eigenvalues(H, P)
    tau = -eta
    scale = float(np.max(np.abs(tau))) if tau.size else 0.0
    negative = tau < -RANK_TOL * scale
    clipped = int(np.count_nonzero(negative))
    if clipped:
        logger.warning(f"Clipped {clipped} negative penalty eigenvalue(s) to 0")
    tau = np.clip(tau, 0.0, None)
    # roundoff in the null directions of P is not curvature
    tau[tau <= RANK_TOL * scale] = 0.0
    return HessianBundle(H=H, P=P, eta=eta, tau=tau, clipped=clipped, jitter=jitter)


def _positive_tau(eta: np.ndarray) -> np.ndarray:
    tau = np.clip(-np.asarray(eta, dtype=float), 0.0, None)
    if tau.size == 0:
        return tau
    top = float(tau.max())
    return tau[tau > RANK_TOL * top] if top > 0 else tau[:0]


def trace_term(eta: np.ndarray, lam: float) -> float:
    """tr{(H + lam P)^-1 P} = -sum eta / (1 - lam eta) = sum tau / (1 + lam tau)"""
    tau = np.clip(-np.asarray(eta, dtype=float), 0.0, None)
    return float(np.sum(tau / (1.0 + lam * tau)))


def effective_dimension(eta: np.ndarray, lam: float) -> float:
    """
    Effective number of penalized parameters, sum over tau > 0 of 1 / (1 + lam tau)

    Equals rank(P) at lam = 0, decreases to 0 as lam grows, and satisfies
    lam * trace_term(eta, lam) = rank(P) - effective_dimension(eta, lam).
    """
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    tau = _positive_tau(eta)
    return float(np.sum(1.0 / (1.0 + lam * tau)))


def marginal_score(lam: float, omega: np.ndarray, bundle: PenaltyBundle,
                   hess: HessianBundle) -> float:
    """
    d l(lambda) / d lambda up to the factor convention:
    -1/2 {||D omega||^2 - [(n-r) + 2a - 2] / lambda + 2 / b - sum eta / (1 - lambda eta)}
    """
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    eta = -np.asarray(hess.tau, dtype=float)
    denom = 1.0 - lam * eta
    if np.any(denom == 0):
        raise PoleError(f"lambda = {lam} hits a pole of the score")
    c = bundle.rank + 2.0 * bundle.a_lambda - 2.0
    return -0.5 * (bundle.roughness(omega) - c / lam + 2.0 / bundle.b_lambda
                   - float(np.sum(eta / denom)))


def update_lambda(omega: np.ndarray, bundle: PenaltyBundle, hess: HessianBundle,
                  lambda_prev: Optional[float] = None,
                  lambda_min: Optional[float] = None,
                  lambda_max: Optional[float] = None) -> LambdaUpdate:
    """
    Root of the marginal score in lambda

    Damped fixed point lambda <- sqrt(lambda * F(lambda)) with
    F(lambda) = [(n-r) + 2a - 2] / (||D omega||^2 + 2/b + sum tau / (1 + lambda tau)),
    safeguarded by bisection on a bracketing interval and polished with
    Brent's method on log lambda if it stalls.

    Args:
        omega: Current weights
        bundle: Penalty of the fit
        hess: Hessian bundle at the current iterate
        lambda_prev: Starting point (previous lambda)
        lambda_min: Lower clamp (defaults to Config.LAMBDA_MIN)
        lambda_max: Upper clamp (defaults to Config.LAMBDA_MAX)

    Returns:
        LambdaUpdate; clamped is "lower"/"upper" when the score has no sign
        change on the clamp interval
    """
    lo_bound = Config.LAMBDA_MIN if lambda_min is None else lambda_min
    hi_bound = Config.LAMBDA_MAX if lambda_max is None else lambda_max
    c = bundle.rank + 2.0 * bundle.a_lambda - 2.0
    if c <= 0:
        raise DomainError(f"(n - r) + 2a - 2 = {c} must be positive")
    d2 = bundle.roughness(omega) + 2.0 / bundle.b_lambda
    tau = np.asarray(hess.tau, dtype=float)

    def h(lam: float) -> float:
        # lambda times twice the score; same sign, decreasing in lambda
        return c - lam * (d2 + float(np.sum(tau / (1.0 + lam * tau))))

    def F(lam: float) -> float:
        return c / (d2 + float(np.sum(tau / (1.0 + lam * tau))))

    if h(hi_bound) > 0:
        logger.warning(f"Lambda score positive up to {hi_bound:g}; clamping")
        return LambdaUpdate(value=hi_bound, clamped="upper")
    if h(lo_bound) < 0:
        logger.warning(f"Lambda score negative down to {lo_bound:g}; clamping")
        return LambdaUpdate(value=lo_bound, clamped="lower")

    lo, hi = lo_bound, hi_bound
    lam = float(np.clip(lambda_prev if lambda_prev else 1.0, lo_bound, hi_bound))
    for iteration in range(1, FIXED_POINT_MAX_ITER + 1):
        value = h(lam)
        if value == 0:
            return LambdaUpdate(value=lam, iterations=iteration)
        if value > 0:
            lo = lam
        else:
            hi = lam
        proposal = math.sqrt(lam * F(lam))
        if not lo < proposal < hi:
            proposal = math.sqrt(lo * hi)  # bisection in log lambda
        if abs(math.log(proposal) - math.log(lam)) < ROOT_RTOL:
            return LambdaUpdate(value=proposal, iterations=iteration)
        lam = proposal

    root = math.exp(brentq(lambda u: h(math.exp(u)), math.log(lo), math.log(hi),
                           xtol=1e-14, rtol=ROOT_RTOL))
    return LambdaUpdate(value=root, iterations=FIXED_POINT_MAX_ITER, method="brent")
