"""
Process settings for airsum.
Includes thread count, logging configuration and debug checks.
"""

import logging.config
import os
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from core.exceptions import ConfigError

# Load environment variables
load_dotenv()


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# ============================================================================
# Runtime Settings
# ============================================================================


def read_threads() -> int:
    """Thread count from AIRSUM_THREADS, read at call time; CPU count when unset."""
    raw = os.getenv("AIRSUM_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(
            f"AIRSUM_THREADS must be a positive integer, got {raw!r}"
        ) from exc
    if threads < 1:
        raise ConfigError(f"AIRSUM_THREADS must be a positive integer, got {raw!r}")
    return threads


# Decoder state positivity assertions (nu, v, lambda, sigma^2 > 0 after
# every layer).
DEBUG = os.getenv("AIRSUM_DEBUG", "False") == "True"

# Exit codes of the command-line front end
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# ============================================================================
# Logging Configuration
# ============================================================================

LOG_LEVEL = os.getenv("AIRSUM_LOG_LEVEL", "INFO")
LOG_FORMAT = os.getenv("AIRSUM_LOG_FORMAT", "verbose")

LOGGING: dict[str, Any] = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime} {module} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {message}",
            "style": "{",
        },
        "json": {
            "()": "pythonjsonlogger.jsonlogger.JsonFormatter",
            "format": "%(levelname)s %(asctime)s %(name)s %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": LOG_FORMAT,
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
    "loggers": {
        "airsum": {
            "handlers": ["console"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
    },
}


def configure_logging(verbose: bool = False) -> None:
    """
    Apply the LOGGING dict.

    Args:
        verbose: Lower the airsum logger to DEBUG so structured decoder
            diagnostics are emitted.

    Raises:
        ConfigError: If AIRSUM_LOG_FORMAT names an unknown formatter.
    """
    if LOG_FORMAT not in LOGGING["formatters"]:
        raise ConfigError(
            f"AIRSUM_LOG_FORMAT must be one of {sorted(LOGGING['formatters'])}, "
            f"got {LOG_FORMAT!r}"
        )
    settings = {
        **LOGGING,
        "loggers": {
            "airsum": {
                **LOGGING["loggers"]["airsum"],
                "level": "DEBUG" if verbose else LOG_LEVEL,
            }
        },
    }
    logging.config.dictConfig(settings)
