from __future__ import annotations


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


class InvalidTemplateError(ValueError):
    """Raised for trace templates that do not list every segment exactly once, in order."""


class ConfigError(ValueError):
    """Raised for malformed or unknown experiment configuration."""


class NaNGradientError(FloatingPointError):
    """A non-finite gradient reached the optimizer.

    ``diagnostics`` carries the offending parameter names and counts so the
    harness can dump them next to the step index.
    """

    def __init__(self, message: str, diagnostics: dict | None = None, step: int | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.step = step
