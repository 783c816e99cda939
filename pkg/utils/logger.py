"""
Logging utility for MomentFit
Centralized logging configuration
"""

import logging
import sys
import traceback
from pathlib import Path
from logging.handlers import RotatingFileHandler
from typing import Optional

from colorama import Fore, Style, just_fix_windows_console

sys.path.append(str(Path(__file__).parent.parent))
from config import Config

just_fix_windows_console()


class ColoredFormatter(logging.Formatter):
    """Custom formatter with colors for console output"""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.MAGENTA,
    }

    def format(self, record):
        # Color a copy so file handlers keep the plain level name
        record = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname)
        if color:
            record.levelname = f"{color}{record.levelname}{Style.RESET_ALL}"
        return super().format(record)


def setup_logger(name: str, log_file: Optional[str] = None,
                 level: Optional[str] = None) -> logging.Logger:
    """
    Setup logger with file and console handlers

    Args:
        name: Logger name
        log_file: Optional log file path (defaults to Config.LOG_FILE)
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO))

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    date_format = '%Y-%m-%d %H:%M:%S'

    # Console handler with colors; stdout is reserved for command results
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(ColoredFormatter(log_format, datefmt=date_format))
    logger.addHandler(console_handler)

    # File handler (rotating)
    file_path = Path(log_file) if log_file else Config.LOG_FILE
    if file_path is not None:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            file_path,
            maxBytes=10 * 1024 * 1024,  # 10 MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(log_format, datefmt=date_format))
        logger.addHandler(file_handler)

    return logger


def log_exception(logger: logging.Logger, exception: Exception, context: str = ""):
    """
    Log exception with full traceback

    Args:
        logger: Logger instance
        exception: Exception object
        context: Additional context information
    """
    error_msg = f"{context}: {exception}" if context else str(exception)
    logger.error(error_msg)
    logger.debug("".join(traceback.format_exception(type(exception), exception,
                                                    exception.__traceback__)))
