"""
Shared fixtures for the MomentFit test-suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

sys.path.append(str(Path(__file__).parent.parent))

from config import Config
from erlang_model.erlang_core import ErlangMixture, tijms_weights
from erlang_model.fitter import FitOptions, fit
from utils.summary_data import read_summary

EXAMPLE_PATH = Config.DATA_DIR / "lognormal750.json"


@pytest.fixture(scope="session")
def example_summary():
    """The worked local-moment example: 4 bins, N = 750, k = (4, 4, 4, 1)"""
    return read_summary(EXAMPLE_PATH)


@pytest.fixture(scope="session")
def example_fit(example_summary):
    return fit(example_summary, FitOptions(n=50, r=2, seed=0))


@pytest.fixture(scope="session")
def smooth_mixture():
    """Tijms discretization of LogNormal(0, 0.5) on 20 shapes"""
    return tijms_weights(stats.lognorm(s=0.5).cdf, theta=0.2, n=20)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_mixture(rng):
    """Factory of Dirichlet-weighted mixtures with a scale in [0.2, 2]"""
    def make(n: int) -> ErlangMixture:
        weights = rng.dirichlet(np.ones(n))
        return ErlangMixture(weights / weights.sum(), float(rng.uniform(0.2, 2.0)))
    return make
