"""Configuration management using Pydantic Settings."""
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field
from typing import Literal
import structlog
import logging
import sys


class Settings(BaseSettings):
    """Process-wide engine settings with environment variable support.

    Every field can be overridden with a ``QFT_``-prefixed environment variable
    (``QFT_LOG_LEVEL=DEBUG``) or a ``.env`` file in the working directory.
    """

    model_config = SettingsConfigDict(
        env_prefix="QFT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Quantization defaults
    default_bit_width: int = Field(
        default=8,
        ge=2,
        le=8,
        description="Bit width used for weights, gradients and momentum"
    )
    default_outlier_fraction: float = Field(
        default=0.01,
        ge=0.0,
        lt=0.5,
        description="Fraction of weight entries kept exactly in the sparse part"
    )
    threshold_mode: Literal["percentile", "range"] = Field(
        default="percentile",
        description="How outlier thresholds are derived from the outlier fraction"
    )
    degenerate_scale_exponent: int = Field(
        default=-20,
        le=-8,
        description="Scale for an all-zero channel is max(|min|, 1) * 2**exponent"
    )

    # Checkpoints and artifacts
    checkpoint_version: int = Field(
        default=1,
        ge=1,
        description="Checkpoint format version written by this build"
    )
    output_dir: str = Field(
        default="./runs",
        description="Default directory for checkpoints, metrics and reports"
    )

    # Data loading
    prefetch_batches: int = Field(
        default=0,
        ge=0,
        le=64,
        description="Batches prepared ahead by the loader worker (0 disables the worker)"
    )

    # Reports
    distribution_outlier_k: float = Field(
        default=3.0,
        gt=0.0,
        description="Entries further than k standard deviations from the mean count as outliers"
    )

    # Logging
    log_level: str = Field(
        default="INFO",
        description="Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)"
    )
    log_format: Literal["json", "console"] = Field(
        default="json",
        description="Log renderer; DEBUG level always renders for the console"
    )


def configure_logging(log_level: str = "INFO", log_format: str = "json") -> None:
    """Configure structured logging with structlog.

    Logs are written to stderr so that reports printed by the CLI on stdout
    can be piped without interleaved log lines.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: ``json`` or ``console``
    """
    log_level_value = getattr(logging, log_level.upper(), logging.INFO)
    use_console = log_level.upper() == "DEBUG" or log_format == "console"

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer() if use_console else structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(log_level_value),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def get_settings() -> Settings:
    """Get engine settings.

    Returns:
        Settings: Settings instance read from the environment
    """
    return Settings()


def get_logger(name: str) -> structlog.BoundLogger:
    """Get a structured logger instance.

    Args:
        name: Logger name (usually __name__)

    Returns:
        structlog.BoundLogger: Configured logger instance
    """
    return structlog.get_logger(name)


# Initialize settings and logging on module import
settings = get_settings()
configure_logging(settings.log_level, settings.log_format)
