"""
Delta-method confidence bands for the fitted mixture
Pointwise density, quantiles and TVaR from the penalized Hessian at the estimate
"""

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.stats import norm

sys.path.append(str(Path(__file__).parent.parent))
from erlang_model.erlang_core import (ErlangMixture, cdf, inc_gamma_ladder, pdf, quantile,
                                      quantiles, var_tvar)
from erlang_model.fitter import FitResult
from erlang_model.lambda_select import HessianBundle
from utils.errors import DomainError, MomentFitError, SingularHessianError

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class ConfidenceBand:
    """Pointwise band center +- z sd at a stated level"""
    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"grid": self.grid, "center": self.center,
                             "lower": self.lower, "upper": self.upper})


def _penalized_factor(hess: HessianBundle, lam: float) -> np.ndarray:
    """
    Lower Cholesky factor of H + lambda P, with jitter

    Raises:
        SingularHessianError: if the penalized Hessian is not positive definite
    """
    A = hess.H + lam * hess.P
    A = 0.5 * (A + A.T)
    scale = float(np.mean(np.abs(np.diag(A)))) or 1.0
    for level in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            return cholesky(A + level * scale * np.eye(A.shape[0]), lower=True)
        except LinAlgError:
            continue
    raise SingularHessianError("penalized Hessian is not positive definite even after jitter")


def delta_variance(grad_f: np.ndarray, hess: HessianBundle, lam: float, n_obs: int,
                   scale_by_n: bool = True) -> float:
    """
    n_scale * grad' (H + lambda P)^-1 grad

    n_scale is 1/N for an objective without N factors and 1 otherwise.
    Computed as the squared norm of L^-1 grad, so never negative.
    """
    grad_f = np.asarray(grad_f, dtype=float)
    if grad_f.shape != (hess.H.shape[0],):
        raise DomainError(f"gradient has shape {grad_f.shape}, Hessian is {hess.H.shape}")
    if not np.any(grad_f):
        return 0.0
    n_scale = 1.0 if scale_by_n else 1.0 / n_obs
    v = solve_triangular(_penalized_factor(hess, lam), grad_f, lower=True)
    return n_scale * float(v @ v)


def _params(fit: FitResult) -> np.ndarray:
    return np.concatenate([fit.mixture.weights, [fit.mixture.scale]])


def _mixture_at(p: np.ndarray) -> ErlangMixture:
    return ErlangMixture.from_raw(p[:-1], float(p[-1]))


def functional_jacobian(fit: FitResult, functional: Callable[[ErlangMixture], np.ndarray]) -> np.ndarray:
    """
    Central-difference Jacobian of a vector functional of the mixture over
    the raw coordinates (omega_1..n, theta); one-sided at zero weights
    """
    p0 = _params(fit)
    f0 = np.atleast_1d(np.asarray(functional(_mixture_at(p0)), dtype=float))
    J = np.empty((f0.size, p0.size))
    for i in range(p0.size):
        h = FD_STEP * (1.0 + abs(p0[i]))
        up = p0.copy()
        up[i] += h
        f_up = np.atleast_1d(functional(_mixture_at(up)))
        if p0[i] - h >= 0:
            down = p0.copy()
            down[i] -= h
            J[:, i] = (f_up - np.atleast_1d(functional(_mixture_at(down)))) / (2.0 * h)
        else:
            J[:, i] = (f_up - f0) / h
    return J


def _quantile_jacobian_implicit(mix: ErlangMixture, probs: Sequence[float]) -> np.ndarray:
    """dq/d(omega, theta) from F(q) = p: dq/domega_i = -(P(q/theta, i) - F(q)) / f(q), dq/dtheta = q/theta"""
    J = np.empty((len(probs), mix.n + 1))
    for row, p in enumerate(probs):
        q = quantile(mix, p)
        density = pdf(mix, q)
        P, _ = inc_gamma_ladder(q / mix.scale, 1.0, mix.n)
        J[row, :-1] = -(P - cdf(mix, q)) / density
        J[row, -1] = q / mix.scale
    return J


def _band(center: np.ndarray, jac: np.ndarray, fit: FitResult, grid: np.ndarray,
          level: float, floor: float = -math.inf) -> ConfidenceBand:
    if not 0.0 <= level < 1.0:
        raise DomainError(f"band level must lie in [0, 1), got {level}")
    z = float(norm.ppf(0.5 + 0.5 * level))
    sd = np.array([
        math.sqrt(delta_variance(row, fit.hessian, fit.lambda_, fit.n_obs, fit.options.scale_by_n))
        for row in jac
    ])
    lower = np.maximum(center - z * sd, floor)
    upper = center + z * sd
    return ConfidenceBand(grid=np.asarray(grid, dtype=float), center=center,
                          lower=np.minimum(lower, center), upper=upper, level=level)


def density_band(fit: FitResult, grid: Sequence[float], level: float = 0.95) -> ConfidenceBand:
    """Pointwise band for the density on a grid, floored at 0"""
    grid = np.asarray(grid, dtype=float)
    center = pdf(fit.mixture, grid)
    jac = functional_jacobian(fit, lambda m: pdf(m, grid))
    return _band(center, jac, fit, grid, level, floor=0.0)


def quantile_band(fit: FitResult, probs: Sequence[float], level: float = 0.95) -> ConfidenceBand:
    """Pointwise band for the quantile function at the given levels"""
    probs = np.asarray(probs, dtype=float)
    center = quantiles(fit.mixture, probs)
    try:
        jac = functional_jacobian(fit, lambda m: quantiles(m, probs))
    except MomentFitError as e:
        logger.warning(f"Quantile differences failed ({e}); using implicit differentiation")
        jac = _quantile_jacobian_implicit(fit.mixture, probs)
    return _band(center, jac, fit, probs, level)


def tvar_band(fit: FitResult, levels: Sequence[float], level: float = 0.95) -> ConfidenceBand:
    """Pointwise band for TVaR at the given levels"""
    levels = np.asarray(levels, dtype=float)

    def tvars(m: ErlangMixture) -> np.ndarray:
        return np.array([var_tvar(m, a)[1] for a in levels])

    center = tvars(fit.mixture)
    jac = functional_jacobian(fit, tvars)
    return _band(center, jac, fit, levels, level)


def qq_table(fit: Union[FitResult, ErlangMixture], sample: Sequence[float]) -> pd.DataFrame:
    """Empirical against fitted quantiles at plotting positions (i - 0.5) / N"""
    mix = fit.mixture if isinstance(fit, FitResult) else fit
    x = np.sort(np.asarray(sample, dtype=float))
    if x.size == 0:
        raise DomainError("QQ table needs a nonempty sample")
    positions = (np.arange(1, x.size + 1) - 0.5) / x.size
    return pd.DataFrame({"plotting_position": positions, "empirical": x,
                         "fitted": quantiles(mix, positions)})
