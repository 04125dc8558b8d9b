"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration/validation
problems exit 1, runtime/backend problems exit 2, numeric failures exit 3.
"""

from __future__ import annotations


class RelfuseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RelfuseError):
    """Invalid configuration: unknown convention, bad file format, bad field."""


class ArgumentError(RelfuseError, ValueError):
    """An operation was called with arguments violating its contract."""


class EnsembleError(RelfuseError):
    """The ensemble cannot be formed (e.g. empty vocabulary intersection)."""


class TokenizationError(RelfuseError):
    """A byte sequence cannot be tokenized by a model's vocabulary."""


class BackendError(RelfuseError):
    """A model backend failed to produce a distribution."""

    def __init__(self, message: str, model: str | None = None):
        self.model = model
        super().__init__(f"[{model}] {message}" if model else message)


class ProtocolError(BackendError):
    """Malformed or unexpected frame on the wire protocol."""


class RetryableTimeout(BackendError):
    """A wire request timed out; the caller may retry."""


class NumericError(RelfuseError):
    """NaN/Inf encountered during the inverse-transform search."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
