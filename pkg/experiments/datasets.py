"""
Simulation datasets
Known truth distributions on the positive half-line and seeded sampling
"""

import logging
import math
import sys
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats
from scipy.optimize import brentq

sys.path.append(str(Path(__file__).parent.parent))
from config import Config
from utils.errors import DomainError

logger = logging.getLogger(__name__)

DatasetName = Literal["lognormal", "mixgamma", "gaussrevgamma", "mixnormalbeta"]
DATASET_NAMES: Tuple[str, ...] = ("lognormal", "mixgamma", "gaussrevgamma", "mixnormalbeta")

DEFAULT_N_OBS = {"lognormal": 750, "mixgamma": 1000, "gaussrevgamma": 500, "mixnormalbeta": 1000}

# Normal(1, 1/3) restricted to [0, inf)
NORMAL_LOC = 1.0
NORMAL_SCALE = 1.0 / 3.0
REVERSED_GAMMA_SHAPE = 11.0
REVERSED_GAMMA_SCALE = 1.0 / 6.0


class DatasetSpec(BaseModel):
    """One simulation design"""
    model_config = ConfigDict(frozen=True)

    name: DatasetName
    n_obs: int = Field(default=750, ge=1)
    quantile_levels: Tuple[float, ...] = Field(default_factory=lambda: tuple(Config.PARTITION_LEVELS))
    k: Tuple[int, ...] = Field(default_factory=lambda: tuple(Config.MOMENT_COUNTS))
    seed: int = Field(default_factory=lambda: Config.SEED)
    reflection_point: Optional[float] = None

    @field_validator("quantile_levels")
    @classmethod
    def _levels(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(v) < 2 or v[0] != 0.0 or v[-1] != 1.0:
            raise ValueError("levels must run from 0 to 1")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("levels must be strictly increasing")
        return v

    @field_validator("k")
    @classmethod
    def _counts(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(kj < 0 for kj in v):
            raise ValueError("moment counts must be >= 0")
        return v


class ReflectedGamma:
    """M - G for G ~ Gamma(shape, scale), restricted to [0, M)"""

    def __init__(self, reflection_point: float, shape: float = REVERSED_GAMMA_SHAPE,
                 scale: float = REVERSED_GAMMA_SCALE):
        if not reflection_point > 0:
            raise DomainError(f"reflection point must be > 0, got {reflection_point}")
        self.M = float(reflection_point)
        self.base = stats.gamma(shape, scale=scale)
        self.mass = float(self.base.cdf(self.M))  # P(G < M), the part landing in [0, M)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= 0) & (x < self.M)
        return np.where(inside, self.base.pdf(np.clip(self.M - x, 0.0, None)) / self.mass, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        g = np.clip(self.M - x, 0.0, None)
        value = (self.base.cdf(self.M) - self.base.cdf(g)) / self.mass
        return np.where(x < 0, 0.0, np.where(x >= self.M, 1.0, value))

    def rvs(self, size: int, random_state: np.random.Generator) -> np.ndarray:
        out = np.empty(0)
        while out.size < size:
            draw = self.M - self.base.rvs(size=size, random_state=random_state)
            out = np.concatenate([out, draw[draw >= 0]])
        return out[:size]


class MixtureTruth:
    """Finite mixture of scipy-like distributions on [0, inf)"""

    def __init__(self, name: str, components: Sequence[Tuple[float, object]]):
        self.name = name
        self.weights = np.array([w for w, _ in components], dtype=float)
        self.components = [c for _, c in components]
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"{name}: component weights sum to {self.weights.sum()}")

    def pdf(self, x):
        return sum(w * np.asarray(c.pdf(x), dtype=float) for w, c in zip(self.weights, self.components))

    def cdf(self, x):
        return sum(w * np.asarray(c.cdf(x), dtype=float) for w, c in zip(self.weights, self.components))

    def ppf(self, p: float) -> float:
        """Quantile by a bracketed root solve of the mixture distribution function"""
        if not 0.0 < p < 1.0:
            raise DomainError(f"quantile level must lie in (0, 1), got {p}")
        if len(self.components) == 1:
            return float(self.components[0].ppf(p))
        hi = 1.0
        while float(self.cdf(hi)) < p:
            hi *= 2.0
            if hi > 1e12:
                raise DomainError(f"{self.name}: could not bracket quantile {p}")
        return float(brentq(lambda x: float(self.cdf(x)) - p, 0.0, hi, xtol=1e-14, rtol=1e-14))

    def rvs(self, size: int, random_state: np.random.Generator) -> np.ndarray:
        labels = random_state.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for idx, comp in enumerate(self.components):
            mask = labels == idx
            count = int(mask.sum())
            if count:
                out[mask] = comp.rvs(size=count, random_state=random_state)
        return out


def _truncated_normal():
    a = (0.0 - NORMAL_LOC) / NORMAL_SCALE
    return stats.truncnorm(a, math.inf, loc=NORMAL_LOC, scale=NORMAL_SCALE)


@lru_cache(maxsize=1)
def default_reflection_point() -> float:
    """Reflection point calibrated against the reference quantiles"""
    from experiments.calibration import calibrate_reflection_point

    result = calibrate_reflection_point()
    return result.reflection_point


def gauss_reversed_gamma(reflection_point: float) -> MixtureTruth:
    return MixtureTruth("gaussrevgamma", [(0.2, _truncated_normal()),
                                          (0.8, ReflectedGamma(reflection_point))])


def truth_distribution(name: str, reflection_point: Optional[float] = None) -> MixtureTruth:
    """
    The truth behind a named dataset

    Raises:
        DomainError: for an unknown name
    """
    if name == "lognormal":
        return MixtureTruth(name, [(1.0, stats.lognorm(s=0.5, scale=1.0))])
    if name == "mixgamma":
        return MixtureTruth(name, [(1.0 / 3.0, stats.gamma(30.0)), (2.0 / 3.0, stats.gamma(7.0))])
    if name == "gaussrevgamma":
        return gauss_reversed_gamma(reflection_point or default_reflection_point())
    if name == "mixnormalbeta":
        return MixtureTruth(name, [(0.2, _truncated_normal()), (0.8, stats.beta(4.0, 8.0))])
    raise DomainError(f"unknown dataset {name!r}; choose from {', '.join(DATASET_NAMES)}")


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    """Independent stream per (seed, replicate)"""
    return np.random.default_rng([int(seed), int(replicate_index)])


def sample_dataset(spec: DatasetSpec, replicate_index: int) -> np.ndarray:
    """i.i.d. draws of spec.n_obs observations for one replicate"""
    truth = truth_distribution(spec.name, spec.reflection_point)
    return truth.rvs(spec.n_obs, replicate_rng(spec.seed, replicate_index))


def true_quantiles(spec: DatasetSpec, levels: Sequence[float]) -> List[float]:
    truth = truth_distribution(spec.name, spec.reflection_point)
    return [truth.ppf(a) for a in levels]
