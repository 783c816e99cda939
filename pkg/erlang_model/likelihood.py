"""
Composite loglikelihood of a local moment summary under an Erlang mixture
Multinomial part for the bin proportions, Gaussian approximation for the
scaled local moments, and the penalized objective with its gradients
"""

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

sys.path.append(str(Path(__file__).parent.parent))
from erlang_model.erlang_core import (ErlangMixture, MomentTriplet, boxed_moment_table,
                                      triplet_from_moments)
from erlang_model.penalty import PenaltyBundle
from utils.errors import DomainError, SingularCovarianceError
from utils.summary_data import LocalMomentSummary

logger = logging.getLogger(__name__)

JITTER_LEVELS = (0.0, 1e-10, 1e-8, 1e-6)
PI_FLOOR = 1e-300


@dataclass(frozen=True)
class ObjectiveValue:
    """Decomposed penalized objective; total = loglik - penalty"""
    loglik: float
    penalty: float
    total: float
    multinomial_part: float
    gaussian_part: float


def factorize_spd(matrix: np.ndarray, what: str = "matrix") -> Tuple[tuple, float, float]:
    """
    Cholesky factorization with escalating diagonal jitter

    Args:
        matrix: Symmetric PSD matrix
        what: Name used in log and error messages

    Returns:
        (cho_factor result, log-determinant, jitter added)

    Raises:
        SingularCovarianceError: if every jitter level fails
    """
    d = matrix.shape[0]
    scale = float(np.mean(np.abs(np.diag(matrix)))) if d else 0.0
    scale = scale if scale > 0 else 1.0
    for level in JITTER_LEVELS:
        jitter = level * scale
        try:
            factor = cho_factor(matrix + jitter * np.eye(d), lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            continue
        diag = np.diag(factor[0])
        if np.any(diag <= 0):
            continue
        if level > 0:
            logger.debug(f"{what} factorized with jitter {level:g} x mean diagonal")
        return factor, 2.0 * float(np.sum(np.log(diag))), jitter
    raise SingularCovarianceError(f"{what} is not positive definite even after jitter")


def _scales(summary: LocalMomentSummary, scale_by_n: bool) -> Tuple[float, float]:
    """(multiplier of the multinomial term, factor c with Sigma_eff = c Sigma)"""
    if scale_by_n:
        return float(summary.n_obs), 1.0 / summary.n_obs
    return 1.0, 1.0


def _data_terms(mu_full: np.ndarray, summary: LocalMomentSummary, scale_by_n: bool,
                with_coeffs: bool) -> Tuple[float, float, Optional[np.ndarray]]:
    """
    Multinomial and Gaussian parts of the data loglikelihood from the
    per-bin raw moments mu_full[j, o]; optionally the coefficients C[j, o]
    with d loglik = sum C[j, o] d mu_full[j, o]
    """
    s_mult, c_sigma = _scales(summary, scale_by_n)
    pi = mu_full[:, 0]
    pi_hat = np.asarray(summary.pi_hat)
    observed = pi_hat > 0
    if np.any(pi[observed] <= 0):
        return -math.inf, -math.inf, None

    multinomial = s_mult * float(np.sum(pi_hat[observed] * np.log(pi[observed])))

    coeffs = np.zeros_like(mu_full) if with_coeffs else None
    if with_coeffs:
        coeffs[observed, 0] += s_mult * pi_hat[observed] / pi[observed]

    index = summary.observed_index()
    if not index:
        return multinomial, 0.0, coeffs

    triplet = triplet_from_moments(mu_full, summary.k)
    mu = triplet.mu_vector()
    resid = mu - summary.mu_vector()
    sigma_eff = c_sigma * triplet.sigma
    factor, logdet, _ = factorize_spd(sigma_eff, "moment covariance")
    v = cho_solve(factor, resid)
    gaussian = -0.5 * (logdet + float(resid @ v))

    if with_coeffs:
        A = cho_solve(factor, np.eye(resid.size))
        G = A - np.outer(v, v)
        G_mu = G @ mu
        bins = np.array([j for j, _ in index])
        orders = np.array([kk for _, kk in index])
        np.add.at(coeffs, (bins, orders), -v + c_sigma * G_mu)
        same_bin = bins[:, None] == bins[None, :]
        rows, cols = np.nonzero(same_bin)
        np.add.at(coeffs, (bins[rows], orders[rows] + orders[cols]),
                  -0.5 * c_sigma * G[rows, cols])
    return multinomial, gaussian, coeffs


def data_loglik(triplet: MomentTriplet, summary: LocalMomentSummary,
                scale_by_n: bool = True) -> float:
    """
    Composite loglikelihood {pi_hat' log pi} - 1/2 {log|S| + ||mu - mu_hat||^2_S}

    With scale_by_n the multinomial part is multiplied by N and S = Sigma / N;
    otherwise S = Sigma and no N factors appear.

    Returns:
        Loglikelihood, or -inf when a bin with observations has zero model mass
    """
    pi = np.asarray(triplet.pi, dtype=float)
    pi_hat = np.asarray(summary.pi_hat)
    if pi.size != pi_hat.size:
        raise DomainError(f"triplet has {pi.size} bins, summary has {pi_hat.size}")
    observed = pi_hat > 0
    if np.any(pi[observed] <= 0):
        return -math.inf
    s_mult, c_sigma = _scales(summary, scale_by_n)
    multinomial = s_mult * float(np.sum(pi_hat[observed] * np.log(np.maximum(pi[observed], PI_FLOOR))))

    mu = triplet.mu_vector()
    if mu.size == 0:
        return multinomial
    resid = mu - summary.mu_vector()
    factor, logdet, _ = factorize_spd(c_sigma * triplet.sigma, "moment covariance")
    return multinomial - 0.5 * (logdet + float(resid @ cho_solve(factor, resid)))


def evaluate_raw(omega: np.ndarray, theta: float, summary: LocalMomentSummary,
                 lam: Optional[float], penalty: Optional[PenaltyBundle],
                 scale_by_n: bool = True,
                 with_grad: bool = False) -> Tuple[ObjectiveValue, Optional[np.ndarray]]:
    """
    Objective and its gradient in the original coordinates (omega_1..n, theta)

    omega is used as given (no renormalization) so the gradient is the
    plain partial derivative. lam = None drops every penalty term.

    Returns:
        (ObjectiveValue, gradient of total of length n + 1 or None)
    """
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    max_order = 2 * summary.max_order
    n_shapes = n + 1 if with_grad else n
    table = boxed_moment_table(theta, summary.partition.edges, max_order, n_shapes)
    mu_full = np.einsum("i,ijo->jo", omega, table[:n])

    multinomial, gaussian, coeffs = _data_terms(mu_full, summary, scale_by_n, with_grad)
    loglik = multinomial + gaussian
    pen = penalty.value(omega, lam) if (lam is not None and penalty is not None) else 0.0
    value = ObjectiveValue(loglik=loglik, penalty=pen, total=loglik - pen,
                           multinomial_part=multinomial, gaussian_part=gaussian)
    if not with_grad:
        return value, None
    if not math.isfinite(loglik):
        return value, np.full(n + 1, np.nan)

    # d mu_i / d theta = (i / theta) (m_{i+1} - m_i) for shape i
    per_shape = np.einsum("jo,ijo->i", coeffs, table)
    grad = np.empty(n + 1)
    grad[:n] = per_shape[:n]
    shapes = np.arange(1, n + 1, dtype=float)
    grad[n] = float(np.sum(omega * shapes / theta * (per_shape[1:] - per_shape[:n])))
    if lam is not None and penalty is not None:
        grad[:n] -= lam * (penalty.D.T @ (penalty.D @ omega))
    return value, grad


def expected_information(omega: np.ndarray, theta: float, summary: LocalMomentSummary,
                         scale_by_n: bool = True) -> np.ndarray:
    """
    Expected information of the data loglikelihood over (omega_1..n, theta)

    Sum of the multinomial information s sum_j dpi_j dpi_j' / pi_j and the
    Gaussian information J' S^-1 J + 1/2 tr(S^-1 dS S^-1 dS) of the moment
    block, so the result is positive semidefinite at every point.

    Raises:
        SingularCovarianceError: if the moment covariance cannot be factorized
    """
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    table = boxed_moment_table(theta, summary.partition.edges, 2 * summary.max_order, n + 1)
    mu_full = np.einsum("i,ijo->jo", omega, table[:n])

    # jac[p, j, o] = d mu_full[j, o] / d parameter p
    shapes = np.arange(1, n + 1, dtype=float)
    jac = np.empty((n + 1,) + mu_full.shape)
    jac[:n] = table[:n]
    jac[n] = np.einsum("i,ijo->jo", omega * shapes / theta, table[1:] - table[:n])

    s_mult, c_sigma = _scales(summary, scale_by_n)
    pi = mu_full[:, 0]
    live = pi > 0
    d_pi = jac[:, live, 0]
    info = s_mult * (d_pi / pi[live]) @ d_pi.T

    index = summary.observed_index()
    if index:
        bins = np.array([j for j, _ in index])
        orders = np.array([kk for _, kk in index])
        same_bin = bins[:, None] == bins[None, :]
        mu = mu_full[bins, orders]
        triplet = triplet_from_moments(mu_full, summary.k)
        factor, _, _ = factorize_spd(c_sigma * triplet.sigma, "moment covariance")

        d_mu = jac[:, bins, orders]
        d_block = jac[:, bins[:, None], orders[:, None] + orders[None, :]]
        d_sigma = c_sigma * (np.where(same_bin, d_block, 0.0)
                             - d_mu[:, :, None] * mu[None, None, :]
                             - mu[None, :, None] * d_mu[:, None, :])
        info += d_mu @ cho_solve(factor, d_mu.T)
        solved = np.stack([cho_solve(factor, ds) for ds in d_sigma])
        info += 0.5 * np.einsum("pab,qba->pq", solved, solved)
    return 0.5 * (info + info.T)


def penalized_loglik(mix: ErlangMixture, lam: float, summary: LocalMomentSummary,
                     penalty: PenaltyBundle, scale_by_n: bool = True) -> ObjectiveValue:
    """
    l(omega, theta, lambda) = data loglik - 1/2 {-(n-r) log lambda + lambda ||D omega||^2}
                              - {lambda / b - (a - 1) log lambda}
    """
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    if penalty.n != mix.n:
        raise DomainError(f"penalty built for n={penalty.n}, mixture has n={mix.n}")
    value, _ = evaluate_raw(mix.weights, mix.scale, summary, lam, penalty, scale_by_n)
    return value


def to_unconstrained(mix: ErlangMixture) -> np.ndarray:
    """(s, t) with omega = s^2 / sum s^2 and theta = t^2"""
    return np.concatenate([np.sqrt(mix.weights), [math.sqrt(mix.scale)]])


def from_unconstrained(z: np.ndarray) -> Tuple[np.ndarray, float]:
    s = np.asarray(z[:-1], dtype=float)
    sq = s * s
    return sq / sq.sum(), float(z[-1] * z[-1])


def chain_to_unconstrained(z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Map a gradient over (omega, theta) to one over (s, t)"""
    s = np.asarray(z[:-1], dtype=float)
    t = float(z[-1])
    S = float(s @ s)
    omega = s * s / S
    g_omega = grad[:-1]
    out = np.empty_like(grad)
    out[:-1] = 2.0 * s / S * (g_omega - float(g_omega @ omega))
    out[-1] = 2.0 * t * grad[-1]
    return out


def objective_gradient(mix: ErlangMixture, lam: Optional[float], summary: LocalMomentSummary,
                       penalty: Optional[PenaltyBundle], scale_by_n: bool = True) -> np.ndarray:
    """
    Gradient of the total objective over the optimizer coordinates (s_1..s_n, t)
    at the point s = sqrt(omega), t = sqrt(theta)
    """
    if lam is not None and not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    _, grad = evaluate_raw(mix.weights, mix.scale, summary, lam, penalty, scale_by_n, with_grad=True)
    return chain_to_unconstrained(to_unconstrained(mix), grad)


def unconstrained_objective(z: np.ndarray, summary: LocalMomentSummary, lam: Optional[float],
                            penalty: Optional[PenaltyBundle],
                            scale_by_n: bool = True) -> Tuple[float, np.ndarray]:
    """Negative total and its gradient over (s, t), the form scipy minimizers expect"""
    omega, theta = from_unconstrained(z)
    if not (theta > 0 and math.isfinite(theta)):
        return math.inf, np.zeros_like(z)
    try:
        value, grad = evaluate_raw(omega, theta, summary, lam, penalty, scale_by_n, with_grad=True)
    except SingularCovarianceError:
        return math.inf, np.zeros_like(z)
    if not math.isfinite(value.total) or not np.all(np.isfinite(grad)):
        return math.inf, np.zeros_like(z)
    return -value.total, -chain_to_unconstrained(z, grad)
