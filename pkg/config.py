"""
MomentFit Configuration Module
Centralized configuration management using environment variables
"""

import os
from pathlib import Path
from typing import List
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).resolve().parent


def _env_float(name: str, default: str) -> float:
    return float(os.getenv(name, default))


def _env_int(name: str, default: str) -> int:
    return int(os.getenv(name, default))


class Config:
    """Main configuration class for MomentFit"""

    # Application
    APP_NAME = "MomentFit"
    APP_VERSION = "1.0.0"

    # Logging
    LOG_LEVEL = os.getenv("MOMENTFIT_LOG", "INFO").upper()
    _log_file = os.getenv("MOMENTFIT_LOG_FILE", "")  # empty: console only
    LOG_FILE = BASE_DIR / _log_file if _log_file else None

    # Estimator defaults
    MIXTURE_SIZE = _env_int("MOMENTFIT_N", "50")
    PENALTY_ORDER = _env_int("MOMENTFIT_ORDER", "2")
    A_LAMBDA = _env_float("MOMENTFIT_A_LAMBDA", "1.0")
    B_LAMBDA = _env_float("MOMENTFIT_B_LAMBDA", "1e5")  # uninformative Gamma prior on lambda
    MAX_OUTER = _env_int("MOMENTFIT_MAX_OUTER", "50")
    TOL_PARAMS = 1e-6
    TOL_LAMBDA = 1e-4
    TOL_OBJECTIVE = 1e-8
    INNER_RESTARTS = 3
    LAMBDA_MIN = 1e-8
    LAMBDA_MAX = 1e12

    # Reproducibility / experiments
    SEED = _env_int("MOMENTFIT_SEED", "0")
    JOBS = _env_int("MOMENTFIT_JOBS", "0")  # 0 = available parallelism
    REPLICATES = _env_int("MOMENTFIT_S", "30")
    QUANTILE_LEVELS = [0.5, 0.9, 0.95, 0.99, 0.995]
    PARTITION_LEVELS = [0.0, 0.5, 0.9, 0.99, 1.0]
    MOMENT_COUNTS = [4, 4, 4, 1]

    # Paths
    OUT_DIR = Path(os.getenv("MOMENTFIT_OUT", "out"))
    LOGS_DIR = BASE_DIR / "logs"
    DATA_DIR = BASE_DIR / "data"

    @classmethod
    def create_directories(cls):
        """Create necessary directories if they don't exist"""
        if cls.LOG_FILE is not None:
            cls.LOG_FILE.parent.mkdir(parents=True, exist_ok=True)

    @classmethod
    def validate(cls) -> List[str]:
        """Validate configuration and return list of errors"""
        errors = []

        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"MOMENTFIT_LOG has unknown level {cls.LOG_LEVEL!r}")

        if cls.PENALTY_ORDER < 1:
            errors.append("MOMENTFIT_ORDER must be >= 1")

        if cls.MIXTURE_SIZE <= cls.PENALTY_ORDER:
            errors.append("MOMENTFIT_N must exceed MOMENTFIT_ORDER")

        if cls.A_LAMBDA < 1:
            errors.append("MOMENTFIT_A_LAMBDA below 1 may make lambda selection ill-posed")

        if cls.B_LAMBDA <= 0:
            errors.append("MOMENTFIT_B_LAMBDA must be positive")

        if cls.JOBS < 0:
            errors.append("MOMENTFIT_JOBS must be >= 0")

        return errors
