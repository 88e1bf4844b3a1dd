"""
Exception hierarchy for SoLA Desk.

Every error derives from SolaError and from the closest builtin, so callers
may catch either ``SolaError`` or e.g. ``ValueError``.
"""


class SolaError(Exception):
    """Base class for all SoLA Desk errors."""


class ShapeError(SolaError, ValueError):
    """Matrix dimensions do not line up."""


class ParameterError(SolaError, ValueError):
    """A numeric or size parameter is outside its valid range."""


class ConfigError(ParameterError):
    """A configuration object failed validation."""


class NumericError(SolaError, ArithmeticError):
    """Non-finite values or a degenerate (zero-norm) vector."""


class SolaIndexError(SolaError, IndexError):
    """Token id or class label out of range."""


class LifecycleError(SolaError, RuntimeError):
    """An operation violates the module / edit lifecycle."""


class FrozenModuleError(LifecycleError):
    """Attempt to modify a frozen LoRA module."""


class StateError(SolaError, RuntimeError):
    """Inconsistent runtime state (trace mismatch, broken freeze invariant)."""


class ArtifactError(SolaError, FileNotFoundError):
    """An upstream pipeline artifact is missing or unreadable."""

    def __init__(self, path, message: str = ""):
        self.path = str(path)
        super().__init__(message or f"Required artifact not found: {self.path}")
