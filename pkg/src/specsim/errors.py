"""Shared exception types."""

from __future__ import annotations


class ConfigError(ValueError):
    """Raised when a configuration document or data file is invalid.

    The CLI maps this class to exit code 2; every other exception is a
    runtime failure (exit code 1).
    """
