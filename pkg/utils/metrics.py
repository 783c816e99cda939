"""
Distances between distributions and the Kolmogorov-Smirnov test
Used to score fitted mixtures against known truths and raw samples
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.stats import kstwobign

from utils.errors import DomainError

logger = logging.getLogger(__name__)

QUANTILE_TRUNCATION = 1e-6
CDF_TAIL_LEVEL = 1e-8
KL_SUPPORT_LEVEL = 1e-9
DENSITY_FLOOR = 1e-300
QUAD_LIMIT = 200

ScalarFn = Callable[[float], float]


@dataclass
class DistanceReport:
    """Distances of a fitted distribution from a reference, plus KS against a sample"""
    l2_quantile: float
    l2_cdf: float
    l1_quantile: float
    kl: float
    ks_stat: float = math.nan
    ks_pvalue: float = math.nan
    quantile_truncation: float = QUANTILE_TRUNCATION
    kl_infinite: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _split_points(lo: float, hi: float) -> list:
    # Breakpoints crowding toward the upper end, where heavy tails live
    return [lo + (hi - lo) * f for f in (0.5, 0.9, 0.99, 0.999)]


def _quantile_integral(integrand: ScalarFn, delta: float) -> float:
    lo, hi = delta, 1.0 - delta
    value, _ = quad(integrand, lo, hi, points=_split_points(lo, hi), limit=QUAD_LIMIT,
                    epsabs=1e-10, epsrel=1e-8)
    return value


def l2_quantile(q1: ScalarFn, q2: ScalarFn, delta: float = QUANTILE_TRUNCATION) -> float:
    """
    int_delta^(1-delta) (q1(p) - q2(p))^2 dp

    Raises:
        DomainError: if a quantile is not finite inside the range
    """
    def integrand(p: float) -> float:
        d = q1(p) - q2(p)
        if not math.isfinite(d):
            raise DomainError(f"non-finite quantile at level {p}")
        return d * d

    return max(0.0, _quantile_integral(integrand, delta))


def l1_quantile(q1: ScalarFn, q2: ScalarFn, delta: float = QUANTILE_TRUNCATION) -> float:
    """int_delta^(1-delta) |q1(p) - q2(p)| dp"""
    def integrand(p: float) -> float:
        d = q1(p) - q2(p)
        if not math.isfinite(d):
            raise DomainError(f"non-finite quantile at level {p}")
        return abs(d)

    return max(0.0, _quantile_integral(integrand, delta))


def l2_cdf(F1: ScalarFn, F2: ScalarFn, x_max: float) -> float:
    """
    int_0^inf (F1 - F2)^2 dx, split at x_max (typically the larger
    1 - 1e-8 quantile) with the remainder integrated on [x_max, inf)
    """
    if not x_max > 0:
        raise DomainError(f"x_max must be > 0, got {x_max}")

    def integrand(x: float) -> float:
        d = F1(x) - F2(x)
        return d * d

    body, _ = quad(integrand, 0.0, x_max, points=_split_points(0.0, x_max),
                   limit=QUAD_LIMIT, epsabs=1e-12, epsrel=1e-9)
    tail, _ = quad(integrand, x_max, math.inf, limit=QUAD_LIMIT, epsabs=1e-12)
    return max(0.0, body + tail)


def kl_divergence(f1: ScalarFn, f2: ScalarFn, support: Tuple[float, float]) -> float:
    """
    int f1 log(f1 / f2) over support

    Returns:
        Divergence, or +inf when f2 vanishes where f1 carries mass
    """
    lo, hi = support
    if not hi > lo:
        raise DomainError(f"empty support [{lo}, {hi}]")
    hit_zero = False

    def integrand(x: float) -> float:
        nonlocal hit_zero
        a = f1(x)
        if a < DENSITY_FLOOR:
            return 0.0
        b = f2(x)
        if b <= 0:
            hit_zero = True
            return 0.0
        return a * math.log(a / b)

    value, _ = quad(integrand, lo, hi, points=_split_points(lo, hi), limit=QUAD_LIMIT,
                    epsabs=1e-12, epsrel=1e-9)
    if hit_zero:
        logger.warning("Reference density vanishes where the first carries mass; KL is infinite")
        return math.inf
    return max(0.0, value)


def ks_test(sample: Sequence[float], F: Callable[[np.ndarray], np.ndarray]) -> Tuple[float, float]:
    """
    One-sample two-sided Kolmogorov-Smirnov test with the asymptotic p-value

    Args:
        sample: Sorted observations
        F: Distribution function, vectorized

    Returns:
        (D, p-value)
    """
    x = np.asarray(sample, dtype=float)
    if x.size == 0:
        raise DomainError("KS test needs a nonempty sample")
    if np.any(np.diff(x) < 0):
        raise DomainError("KS test needs a sorted sample")
    n = x.size
    Fx = np.asarray(F(x), dtype=float)
    i = np.arange(1, n + 1)
    stat = float(max(np.max(i / n - Fx), np.max(Fx - (i - 1) / n)))
    pvalue = float(np.clip(kstwobign.sf(math.sqrt(n) * stat), 0.0, 1.0))
    return stat, pvalue


def distance_report(q_fit: ScalarFn, F_fit: ScalarFn, f_fit: ScalarFn,
                    q_true: ScalarFn, F_true: ScalarFn, f_true: ScalarFn,
                    sample: Optional[Sequence[float]] = None,
                    F_fit_vec: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> DistanceReport:
    """
    All distances of a fit from a truth; KS of the raw sample against the fit when given

    The KL divergence is that of the truth from the fit, integrated over the
    truth's 1e-9 .. 1 - 1e-9 quantile range.
    """
    x_max = max(q_true(1.0 - CDF_TAIL_LEVEL), q_fit(1.0 - CDF_TAIL_LEVEL))
    kl = kl_divergence(f_true, f_fit, (q_true(KL_SUPPORT_LEVEL), q_true(1.0 - KL_SUPPORT_LEVEL)))
    report = DistanceReport(
        l2_quantile=l2_quantile(q_fit, q_true),
        l2_cdf=l2_cdf(F_fit, F_true, x_max),
        l1_quantile=l1_quantile(q_fit, q_true),
        kl=kl,
        kl_infinite=math.isinf(kl),
    )
    if sample is not None:
        vec = F_fit_vec or np.vectorize(F_fit)
        report.ks_stat, report.ks_pvalue = ks_test(np.sort(np.asarray(sample, dtype=float)), vec)
    return report
