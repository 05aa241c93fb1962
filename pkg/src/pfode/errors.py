"""Exception types shared across the package."""


class PfodeError(Exception):
    """Base class for all package errors."""


class DomainError(PfodeError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(PfodeError, ValueError):
    """A configuration is malformed, incomplete or inconsistent."""


class NumericError(PfodeError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""
