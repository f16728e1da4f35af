"""Exception hierarchy for crnsa."""


class CrnsaError(Exception):
    """Base class for all crnsa errors."""
    pass


class DomainError(CrnsaError, ValueError):
    """Raised when θ or u lies outside the domain of a family."""
    pass


class ParameterError(CrnsaError, ValueError):
    """Raised for invalid algorithm or experiment parameters."""
    pass


class UnsupportedFamilyError(CrnsaError):
    """Raised when a method or functional is not defined for a family."""
    pass


class DivergenceError(CrnsaError):
    """Raised when a rejection loop exceeds its round limit."""
    pass


class EnvelopeError(CrnsaError):
    """Raised when a rejection envelope fails to dominate the density."""
    pass


class FitError(CrnsaError):
    """Raised when a log-log regression cannot be performed."""
    pass


class ConfigurationError(CrnsaError):
    """Raised for invalid problem or configuration-file contents."""
    pass


class CacheCorruptionError(CrnsaError):
    """Raised when cache data is corrupted or invalid."""
    pass
