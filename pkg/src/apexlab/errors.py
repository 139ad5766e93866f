"""Exception types shared across the package."""


class ApexError(Exception):
    """Base class for all package errors."""


class DomainError(ApexError, ValueError):
    """An input lies outside the domain where an operation is defined."""


class ContractViolation(ApexError):
    """A caller broke a precondition (shape, grid or schedule mismatch)."""


class ConfigError(ApexError):
    """Inconsistent or invalid configuration."""


class InvariantFailure(ApexError):
    """An internal invariant did not hold. Indicates a bug, not bad input."""
