"""Probability-flow ODE sampling with an exponential integrator, and
computable W2 error bounds for it."""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, NumericError, PfodeError  # noqa: E402

__all__ = ["__version__", "ConfigError", "DomainError", "NumericError", "PfodeError"]
