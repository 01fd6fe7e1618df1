"""
Logging configuration for the piano-mlr package.
"""

import logging
import os
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(name=__name__, log_level=None):
    """
    Configure package logging with a console handler and an optional rotating file handler.

    Args:
        name: Logger name (usually __name__ from calling module)
        log_level: Optional log level override (defaults to LOG_LEVEL env var or INFO)

    Returns:
        Configured logger instance
    """
    if log_level is None:
        log_level = os.environ.get("LOG_LEVEL", "INFO").upper()
    level = getattr(logging, log_level, logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Prevent duplicate handlers
    if logger.handlers:
        return logger

    # Console handler on stderr; stdout belongs to the CLI's result lines
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(console_handler)

    # File handler only when a log directory is configured (10MB per file, keep 5 backups)
    log_dir = os.environ.get("PIANO_LOG_DIR")
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f"piano_{datetime.now().strftime('%Y%m%d')}.log")
        file_handler = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5)
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)

    # Handlers live on package loggers; do not duplicate through the root logger
    logger.propagate = False
    return logger


def get_logger(name=__name__):
    """
    Get a configured logger instance.

    Args:
        name: Logger name (usually __name__ from calling module)

    Returns:
        Configured logger instance
    """
    return setup_logging(name)
