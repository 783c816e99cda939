"""
Exception hierarchy for MomentFit
"""

from typing import List, Optional


class MomentFitError(Exception):
    """Base class for every error raised by the estimator"""


class DomainError(MomentFitError, ValueError):
    """An argument lies outside the domain of an operation"""


class SummaryParseError(MomentFitError, ValueError):
    """A summary (or mixture/fit) file violates its schema"""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SingularCovarianceError(MomentFitError):
    """Moment covariance could not be factorized even after jitter"""


class SingularHessianError(MomentFitError):
    """Hessian (possibly penalized) could not be factorized even after jitter"""


class PoleError(MomentFitError):
    """The lambda score was evaluated at a pole 1 - lambda * eta = 0"""


class FitFailedError(MomentFitError):
    """The inner optimizer failed on every restart"""

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        self.trace = list(trace or [])
        super().__init__(message)


class CalibrationError(MomentFitError):
    """A calibration did not reproduce its reference values"""
