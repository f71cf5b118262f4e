"""Exception hierarchy shared by every unidex module."""

from __future__ import annotations


class UnidexError(Exception):
    """Base class for all errors raised by unidex."""


class ConfigError(UnidexError, ValueError):
    """Shapes, hyperparameters or flags that cannot work together."""


class ValidationError(UnidexError, ValueError):
    """Input data violates a documented invariant (duplicate ids, bad labels)."""


class RangeError(ValidationError):
    """A semantic ID or code lies outside the code space."""


class ParseError(UnidexError, ValueError):
    """A text record could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LoadError(UnidexError):
    """Base class for binary file decoding failures."""


class MagicMismatchError(LoadError):
    pass


class VersionMismatchError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class NonFiniteError(LoadError):
    pass


class FingerprintMismatchError(LoadError):
    """Index was built with a different quantizer than the one supplied."""


class TrainingError(UnidexError, RuntimeError):
    """Optimization produced a non-finite loss."""
