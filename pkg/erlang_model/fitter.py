"""
Penalized Erlang mixture fitter
Alternates a quasi-Newton solve over (omega, theta) with Laplace-based
updates of the penalty hyperparameter lambda until both settle
"""

import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import eigvalsh
from scipy.optimize import minimize

sys.path.append(str(Path(__file__).parent.parent))
from config import Config
from erlang_model.erlang_core import ErlangMixture
from erlang_model.lambda_select import (HessianBundle, effective_dimension, hessian_bundle,
                                        update_lambda)
from erlang_model.likelihood import (ObjectiveValue, evaluate_raw, expected_information,
                                     from_unconstrained, to_unconstrained,
                                     unconstrained_objective)
from erlang_model.penalty import PenaltyBundle, build_penalty, continuous_roughness
from utils.errors import FitFailedError, SingularHessianError
from utils.summary_data import LocalMomentSummary

logger = logging.getLogger(__name__)

INIT_JITTER = 0.1
HESSIAN_STEP = 1e-5


class FitOptions(BaseModel):
    """Inputs of the fitting algorithm"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(default_factory=lambda: Config.MIXTURE_SIZE)
    r: int = Field(default_factory=lambda: Config.PENALTY_ORDER)
    a_lambda: float = Field(default_factory=lambda: Config.A_LAMBDA)
    b_lambda: float = Field(default_factory=lambda: Config.B_LAMBDA)
    max_outer: int = Field(default_factory=lambda: Config.MAX_OUTER, ge=1)
    tol_params: float = Field(default=Config.TOL_PARAMS, gt=0)
    tol_lambda: float = Field(default=Config.TOL_LAMBDA, gt=0)
    tol_objective: float = Field(default=Config.TOL_OBJECTIVE, gt=0)
    hessian_jitter: Optional[float] = Field(default=None, ge=0)  # None: 1e-8 x mean |diagonal|, at least 1e-8
    # expected: analytic expected information; observed: differences of the gradient
    hessian: Literal["expected", "observed"] = "expected"
    seed: int = Field(default_factory=lambda: Config.SEED)
    scale_by_n: bool = True
    restarts: int = Field(default=Config.INNER_RESTARTS, ge=0)
    inner_maxiter: int = Field(default=2000, ge=1)

    @model_validator(mode="after")
    def _check_orders(self):
        if self.r < 1:
            raise ValueError(f"penalty order r must be >= 1, got {self.r}")
        if self.n <= self.r:
            raise ValueError(f"mixture size n={self.n} must exceed penalty order r={self.r}")
        if not self.b_lambda > 0:
            raise ValueError(f"b_lambda must be > 0, got {self.b_lambda}")
        if (self.n - self.r) + 2 * self.a_lambda - 2 <= 0:
            raise ValueError("(n - r) + 2 a_lambda - 2 must be positive")
        return self


@dataclass
class FitResult:
    """Estimated mixture, selected lambda and the curvature at the estimate"""
    mixture: ErlangMixture
    lambda_: float
    hessian: HessianBundle
    effective_dim: float
    outer_iters: int
    converged: bool
    objective_trace: List[float]
    diagnostics: Dict[str, object]
    objective: ObjectiveValue
    penalty: PenaltyBundle
    options: FitOptions
    n_obs: int
    lambda_trace: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Inner solve

def _initial_point(summary: LocalMomentSummary, n: int,
                   rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Uniform weights with +-10% jitter; modes spread over the observed range"""
    edge = summary.partition.last_finite_edge
    if edge > 0:
        theta = edge / n
    elif summary.max_order >= 1:
        mean = sum(row[0] for row in summary.mu_hat if row)
        theta = max(2.0 * mean / (n + 1), 1e-3)
    else:
        theta = 1.0
    omega = np.full(n, 1.0 / n) * (1.0 + rng.uniform(-INIT_JITTER, INIT_JITTER, size=n))
    return omega / omega.sum(), float(theta)


def _perturb(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return z * (1.0 + rng.uniform(-INIT_JITTER, INIT_JITTER, size=z.size))


def inner_optimize(summary: LocalMomentSummary, lam: Optional[float],
                   init: Tuple[np.ndarray, float], options: FitOptions,
                   penalty: Optional[PenaltyBundle] = None,
                   restarts: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> Tuple[ErlangMixture, ObjectiveValue]:
    """
    Maximize l(omega, theta, lambda) by BFGS in the coordinates
    omega = s^2 / sum s^2, theta = t^2

    Args:
        summary: Observed local moments
        lam: Penalty hyperparameter; None maximizes the data loglikelihood alone
        init: Starting (omega, theta)
        options: Fit options
        penalty: Penalty bundle (built from options when omitted)
        restarts: Number of extra jittered starts (defaults to options.restarts)
        rng: Generator for the restart jitter

    Returns:
        (mixture, objective value) of the best start, never worse than init

    Raises:
        FitFailedError: if the objective is not finite at any start
    """
    penalty = penalty or build_penalty(options.n, options.r, a_lambda=options.a_lambda,
                                       b_lambda=options.b_lambda)
    restarts = options.restarts if restarts is None else restarts
    rng = rng or np.random.default_rng(options.seed)

    omega0 = np.asarray(init[0], dtype=float)
    z0 = to_unconstrained(ErlangMixture.from_raw(omega0, init[1]))
    f0, _ = unconstrained_objective(z0, summary, lam, penalty, options.scale_by_n)
    starts = [z0] + [_perturb(z0, rng) for _ in range(restarts)]

    best_z, best_f = (z0, f0) if math.isfinite(f0) else (None, math.inf)
    trace = [-f0]
    for k, start in enumerate(starts):
        f_start, _ = unconstrained_objective(start, summary, lam, penalty, options.scale_by_n)
        if not math.isfinite(f_start):
            logger.debug(f"Start {k} has a non-finite objective; skipped")
            continue
        result = minimize(
            unconstrained_objective, start,
            args=(summary, lam, penalty, options.scale_by_n),
            method="BFGS", jac=True,
            options={"gtol": 1e-6 * (1.0 + abs(f_start)), "maxiter": options.inner_maxiter},
        )
        trace.append(-float(result.fun))
        if not result.success:
            logger.debug(f"BFGS start {k}: {result.message} after {result.nit} iterations")
        if math.isfinite(result.fun) and result.fun < best_f:
            best_z, best_f = result.x, float(result.fun)

    if best_z is None:
        raise FitFailedError("objective is not finite at any start", trace)

    omega, theta = from_unconstrained(best_z)
    mix = ErlangMixture.from_raw(omega, theta)
    value, _ = evaluate_raw(mix.weights, mix.scale, summary, lam, penalty, options.scale_by_n)
    return mix, value


# ---------------------------------------------------------------------------
# Curvature

def _default_jitter(H: np.ndarray, jitter: Optional[float]) -> float:
    if jitter is not None:
        return jitter
    return 1e-8 * max(float(np.mean(np.abs(np.diag(H)))), 1.0)


def hessian_from_gradient(gradient: Callable[[np.ndarray], np.ndarray], point: np.ndarray,
                          jitter: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    -d(gradient)/d(point) by central differences, symmetrized, plus eps * I

    Args:
        gradient: Gradient of the objective being maximized
        point: Evaluation point
        jitter: eps; defaults to 1e-8 x max(mean absolute diagonal, 1)

    Returns:
        (H, eps)
    """
    point = np.asarray(point, dtype=float)
    d = point.size
    H = np.empty((d, d))
    for i in range(d):
        h = HESSIAN_STEP * (1.0 + abs(point[i]))
        up = point.copy()
        down = point.copy()
        up[i] += h
        down[i] -= h
        H[:, i] = -(np.asarray(gradient(up)) - np.asarray(gradient(down))) / (2.0 * h)
    H = 0.5 * (H + H.T)
    eps = _default_jitter(H, jitter)
    return H + eps * np.eye(d), eps


def _expected_bundle(summary: LocalMomentSummary, mix: ErlangMixture, options: FitOptions,
                     P: np.ndarray) -> HessianBundle:
    info = expected_information(mix.weights, mix.scale, summary, options.scale_by_n)
    eps = _default_jitter(info, options.hessian_jitter)
    return hessian_bundle(info + eps * np.eye(info.shape[0]), P, jitter=eps)


def hessian_at(summary: LocalMomentSummary, mix: ErlangMixture, options: FitOptions,
               penalty: Optional[PenaltyBundle] = None,
               gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> HessianBundle:
    """
    Data-only curvature in the original coordinates (omega_1..n, theta)

    With options.hessian = "expected" this is the analytic expected
    information, positive definite once eps * I is added. "observed"
    differentiates the analytic gradient instead; the composite
    loglikelihood is not concave, so an observed Hessian that is not
    positive definite is reported and replaced by the expected information.

    Args:
        summary: Observed local moments
        mix: Point of evaluation
        options: Fit options (hessian, hessian_jitter, scale_by_n)
        penalty: Penalty bundle providing P
        gradient: Replacement gradient; used by tests with known objectives

    Returns:
        HessianBundle with eta and tau; diagnostics["observed_indefinite"]
        marks a replaced observed Hessian

    Raises:
        SingularHessianError: if a hooked gradient gives an indefinite Hessian
    """
    penalty = penalty or build_penalty(mix.n, options.r, a_lambda=options.a_lambda,
                                       b_lambda=options.b_lambda)
    if gradient is None and options.hessian == "expected":
        return _expected_bundle(summary, mix, options, penalty.P)

    point = np.concatenate([mix.weights, [mix.scale]])
    hooked = gradient is not None
    if not hooked:
        def gradient(p: np.ndarray) -> np.ndarray:
            _, g = evaluate_raw(p[:-1], float(p[-1]), summary, None, None,
                                options.scale_by_n, with_grad=True)
            return g

    H, eps = hessian_from_gradient(gradient, point, options.hessian_jitter)
    P = penalty.P if H.shape == penalty.P.shape else np.zeros_like(H)
    try:
        return hessian_bundle(H, P, jitter=eps)
    except SingularHessianError:
        if hooked:
            raise
    smallest = float(eigvalsh(H)[0])
    logger.warning(f"Observed Hessian is not positive definite (smallest eigenvalue "
                   f"{smallest:.4g}); using the expected information")
    bundle = _expected_bundle(summary, mix, options, P)
    return replace(bundle, diagnostics={"observed_indefinite": True,
                                        "observed_min_eigenvalue": smallest})


# ---------------------------------------------------------------------------
# Outer loop

def fit(summary: LocalMomentSummary, options: Optional[FitOptions] = None) -> FitResult:
    """
    Fit a penalized Erlang mixture to a local moment summary

    Args:
        summary: Observed local moments
        options: Fit options (defaults from Config)

    Returns:
        FitResult, converged or not
    """
    options = options or FitOptions()
    penalty = build_penalty(options.n, options.r, a_lambda=options.a_lambda,
                            b_lambda=options.b_lambda)
    rng = np.random.default_rng(options.seed)
    omega, theta = _initial_point(summary, options.n, rng)

    diagnostics: Dict[str, object] = {
        "lambda_clamped": None,
        "negative_tau_clipped": 0,
        "hessian_jitter": 0.0,
        "degenerate_information": summary.n_bins == 1 and summary.max_order == 0,
        "inner_failures": 0,
        "hessian": options.hessian,
        "hessian_min_eigenvalue": None,
        "observed_hessian_replaced": 0,
    }
    if diagnostics["degenerate_information"]:
        logger.warning("Summary carries no information beyond total mass; fit is penalty-dominated")

    trace: List[float] = []
    lambda_trace: List[float] = []
    lam: Optional[float] = None
    prev_params: Optional[np.ndarray] = None
    prev_total: Optional[float] = None
    converged = False
    mix = None
    value = None
    hess = None
    outer = 0

    for outer in range(1, options.max_outer + 1):
        restart_rng = np.random.default_rng([options.seed, outer])
        restarts = options.restarts if outer == 1 else 0
        try:
            mix, value = inner_optimize(summary, lam, (omega, theta), options, penalty,
                                        restarts=restarts, rng=restart_rng)
        except FitFailedError:
            if restarts:
                raise
            diagnostics["inner_failures"] += 1
            logger.warning(f"Warm start failed at outer iteration {outer}; restarting")
            mix, value = inner_optimize(summary, lam, (omega, theta), options, penalty,
                                        restarts=options.restarts, rng=restart_rng)
        trace.append(value.total)

        hess = hessian_at(summary, mix, options, penalty)
        if hess.diagnostics.get("observed_indefinite"):
            diagnostics["observed_hessian_replaced"] += 1
        diagnostics["hessian_min_eigenvalue"] = float(eigvalsh(hess.H)[0])
        diagnostics["negative_tau_clipped"] = hess.clipped
        diagnostics["hessian_jitter"] = hess.jitter
        update = update_lambda(mix.weights, penalty, hess, lam)
        diagnostics["lambda_clamped"] = update.clamped
        new_lam = update.value
        lambda_trace.append(new_lam)

        params = np.concatenate([mix.weights, [mix.scale]])
        logger.debug(
            f"outer {outer}: lambda={new_lam:.6g} total={value.total:.10g} "
            f"edf={effective_dimension(-hess.tau, new_lam):.4f}"
        )

        if prev_params is not None and lam is not None:
            d_params = float(np.max(np.abs(params - prev_params)))
            d_lambda = abs(math.log(new_lam) - math.log(lam))
            d_total = abs(value.total - prev_total)
            if (d_params < options.tol_params and d_lambda < options.tol_lambda
                    and d_total < options.tol_objective * (1.0 + abs(value.total))):
                converged = True

        prev_params, prev_total = params, value.total
        omega, theta = mix.weights, mix.scale
        lam = new_lam
        if converged:
            break

    effective_dim = effective_dimension(-hess.tau, lam)
    diagnostics["continuous_roughness"] = continuous_roughness(mix, options.r)
    if converged:
        logger.info(f"✓ Fit converged after {outer} outer iterations "
                    f"(lambda={lam:.6g}, effective dimension={effective_dim:.3f})")
    else:
        logger.warning(f"Fit did not converge within {options.max_outer} outer iterations")
    if diagnostics["lambda_clamped"]:
        logger.warning(f"Selected lambda sits at the {diagnostics['lambda_clamped']} clamp")

    return FitResult(mixture=mix, lambda_=lam, hessian=hess, effective_dim=effective_dim,
                     outer_iters=outer, converged=converged, objective_trace=trace,
                     diagnostics=diagnostics, objective=value, penalty=penalty,
                     options=options, n_obs=summary.n_obs, lambda_trace=lambda_trace)


def weighted_modes(fit_result: FitResult) -> Tuple[np.ndarray, np.ndarray]:
    """Mode locations theta * (j - 1) and weighted heights omega_j * y_{j-1}"""
    mix = fit_result.mixture
    _, y = fit_result.penalty.modes
    x = mix.scale * np.arange(mix.n, dtype=float)
    return x, mix.weights * y
