"""
Tests for configuration and logging setup
"""

import logging
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).parent.parent))

from config import Config
from erlang_model.fitter import FitOptions
from utils.logger import setup_logger

logger = setup_logger('test')


def test_defaults_are_valid():
    """Shipped defaults pass validation and feed FitOptions"""
    assert Config.validate() == []
    options = FitOptions()
    assert options.n == Config.MIXTURE_SIZE
    assert options.r == Config.PENALTY_ORDER
    assert options.b_lambda == Config.B_LAMBDA
    assert Config.QUANTILE_LEVELS == [0.5, 0.9, 0.95, 0.99, 0.995]


def test_validate_reports_problems(monkeypatch):
    monkeypatch.setattr(Config, "MIXTURE_SIZE", 2)
    monkeypatch.setattr(Config, "B_LAMBDA", -1.0)
    monkeypatch.setattr(Config, "LOG_LEVEL", "LOUD")
    errors = Config.validate()
    assert len(errors) == 3
    assert any("MOMENTFIT_N" in e for e in errors)


def test_log_file_directory(monkeypatch, tmp_path):
    """The log directory is created only when a log file is configured"""
    target = tmp_path / "logs" / "momentfit.log"
    monkeypatch.setattr(Config, "LOG_FILE", target)
    Config.create_directories()
    assert target.parent.is_dir()


def test_setup_logger_is_idempotent(tmp_path):
    """A second setup does not stack handlers"""
    first = setup_logger("momentfit.test_config", log_file=str(tmp_path / "x.log"), level="DEBUG")
    second = setup_logger("momentfit.test_config", level="WARNING")
    assert first is second
    assert len(second.handlers) == 2
    assert second.level == logging.WARNING
    second.warning("written once")
    assert (tmp_path / "x.log").read_text().count("written once") == 1
