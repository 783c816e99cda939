"""
Roughness penalties for Erlang mixtures
Finite-difference coefficients, the weighted-mode sequence, the discrete
difference matrix D_r with its block penalty P_r, and the closed-form
continuous roughness matrix
"""

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln

sys.path.append(str(Path(__file__).parent.parent))
from config import Config
from erlang_model.erlang_core import ErlangMixture
from utils.errors import DomainError

logger = logging.getLogger(__name__)

# Beyond this index the mode heights are evaluated through log-Gamma
DIRECT_MODE_LIMIT = 20


@dataclass(frozen=True)
class PenaltyBundle:
    """
    Everything the fitter needs to penalize an n-component mixture
    """
    order: int
    n: int
    D: np.ndarray
    P: np.ndarray
    a_lambda: float
    b_lambda: float
    modes: Tuple[np.ndarray, np.ndarray]

    @property
    def rank(self) -> int:
        """n - r, the number of penalized directions"""
        return self.n - self.order

    def roughness(self, omega: np.ndarray) -> float:
        """||D_r omega||^2"""
        d = self.D @ np.asarray(omega, dtype=float)
        return float(d @ d)

    def value(self, omega: np.ndarray, lam: float) -> float:
        """
        Penalty subtracted from the data loglikelihood:
        1/2 {-(n-r) log lam + lam ||D omega||^2} + {lam / b - (a - 1) log lam}
        """
        if not lam > 0:
            raise DomainError(f"lambda must be > 0, got {lam}")
        log_lam = math.log(lam)
        smooth = 0.5 * (-self.rank * log_lam + lam * self.roughness(omega))
        prior = lam / self.b_lambda - (self.a_lambda - 1.0) * log_lam
        return smooth + prior


def fd_coeffs(r: int) -> List[int]:
    """
    Coefficients c_{r,0..r} of the r-th forward difference

    c_{0,0} = 1 and c_{r,k} = c_{r-1,k} - c_{r-1,k-1}.
    """
    if r < 0 or int(r) != r:
        raise DomainError(f"difference order must be a nonnegative integer, got {r}")
    coeffs = [1]
    for _ in range(int(r)):
        padded = coeffs + [0]
        coeffs = [padded[k] - (padded[k - 1] if k > 0 else 0) for k in range(len(padded))]
    return coeffs


def mode_sequence(n: int, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mode locations and heights of the first n unit-scale Erlang densities

    Args:
        n: Number of couples
        theta: Common scale

    Returns:
        (x, y) with x_i = theta * i and y_i = i^i e^-i / i! for i = 0..n-1
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=float)
    x = theta * i
    y = np.empty(n)
    for idx in range(n):
        if idx == 0:
            y[idx] = 1.0  # 0^0 = 1
        elif idx <= DIRECT_MODE_LIMIT:
            y[idx] = idx ** idx * math.exp(-idx) / math.factorial(idx)
        else:
            y[idx] = math.exp(idx * math.log(idx) - idx - gammaln(idx + 1.0))
    return x, y


def difference_matrix(r: int, n: int, theta: float = 1.0) -> np.ndarray:
    """
    D_r of shape (n - r, n): row k takes the r-th difference of the
    weighted-mode sequence omega_j * y_{j-1} starting at component k
    """
    if r < 1:
        raise DomainError(f"penalty order must be >= 1, got {r}")
    if r >= n:
        raise DomainError(f"penalty order r={r} must be smaller than n={n}")
    c = fd_coeffs(r)
    _, y = mode_sequence(n, theta)
    D = np.zeros((n - r, n))
    for k in range(n - r):
        for offset, coeff in enumerate(c):
            D[k, k + offset] = coeff * y[k + offset]
    return D


def continuous_penalty_matrix(r: int, n: int) -> np.ndarray:
    """
    Unit-scale roughness matrix: omega' P omega = int f^(r)(x)^2 dx for the
    mixture density f with weights omega and theta = 1

    Args:
        r: Derivative order, r >= 0
        n: Mixture size

    Returns:
        Symmetric (n, n) matrix
    """
    if r < 0:
        raise DomainError(f"derivative order must be >= 0, got {r}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    c = fd_coeffs(r)
    P = np.zeros((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            total = 0.0
            for k, ck in enumerate(c):
                if i - k <= 0:
                    break
                for l, cl in enumerate(c):
                    if j - l <= 0:
                        break
                    m = i + j - k - l - 1
                    log_term = gammaln(m) - gammaln(i - k) - gammaln(j - l) - m * math.log(2.0)
                    total += ck * cl * math.exp(log_term)
            P[i - 1, j - 1] = P[j - 1, i - 1] = total
    return P


def penalty_matrix(bundle: PenaltyBundle) -> np.ndarray:
    """P_r = [[D'D, 0], [0, 0]]; the last slot belongs to theta"""
    n = bundle.n
    P = np.zeros((n + 1, n + 1))
    P[:n, :n] = bundle.D.T @ bundle.D
    return P


def build_penalty(n: int, r: int, theta: float = 1.0,
                  a_lambda: Optional[float] = None,
                  b_lambda: Optional[float] = None) -> PenaltyBundle:
    """
    Assemble the penalty for an n-component mixture

    Args:
        n: Mixture size
        r: Difference order, 1 <= r < n
        theta: Scale used for the mode locations (heights do not depend on it)
        a_lambda: Gamma prior shape on lambda (defaults to Config.A_LAMBDA)
        b_lambda: Gamma prior scale on lambda (defaults to Config.B_LAMBDA; inf allowed)

    Returns:
        PenaltyBundle
    """
    a = Config.A_LAMBDA if a_lambda is None else float(a_lambda)
    b = Config.B_LAMBDA if b_lambda is None else float(b_lambda)
    if not b > 0:
        raise DomainError(f"b_lambda must be > 0, got {b}")
    if (n - r) + 2.0 * a - 2.0 <= 0:
        raise DomainError(f"(n - r) + 2 a_lambda - 2 must be positive (n={n}, r={r}, a={a})")

    D = difference_matrix(r, n, theta)
    bundle = PenaltyBundle(order=int(r), n=int(n), D=D, P=np.zeros((n + 1, n + 1)),
                           a_lambda=a, b_lambda=b, modes=mode_sequence(n, theta))
    object.__setattr__(bundle, "P", penalty_matrix(bundle))
    logger.debug(f"Built order-{r} difference penalty for n={n}")
    return bundle


def continuous_roughness(mix: ErlangMixture, r: int) -> float:
    """int f^(r)(x)^2 dx of the mixture density, theta^-(2r+1) omega' P omega"""
    P = continuous_penalty_matrix(r, mix.n)
    return float(mix.scale ** (-(2 * r + 1)) * (mix.weights @ P @ mix.weights))
