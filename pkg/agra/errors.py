"""
Exception hierarchy for the AGRA benchmark.
"""


class AgraError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AgraError):
    """Unknown backbone ids, unknown modes, conflicting toggles, bad config keys."""


class ValidationError(AgraError, ValueError):
    """Input violates a shape, range or contract rule."""


class ManifestParseError(ValidationError):
    """A manifest line could not be parsed."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class StateError(AgraError, RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. unpopulated bank)."""


class AuditError(AgraError):
    """A target-domain label reached a training loss."""
