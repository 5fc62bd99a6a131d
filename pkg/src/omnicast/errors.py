class OmnicastError(Exception):
    """Base class for errors raised by omnicast."""


class DomainError(OmnicastError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(OmnicastError, ValueError):
    """A configuration file or object failed validation."""


class DataError(OmnicastError):
    """Input data is missing, truncated, or inconsistent."""


class TrainingFault(OmnicastError, RuntimeError):
    """Training produced non-finite or divergent values."""
