"""Exception hierarchy."""


class CoarsekitError(Exception):
    """Base class for all package errors."""


class ConfigError(CoarsekitError, ValueError):
    """Invalid configuration or arguments."""


class DomainError(CoarsekitError, ValueError):
    """Input outside the domain of an operation (e.g. non-finite mediator)."""


class NumericalError(CoarsekitError, ArithmeticError):
    """A numerical computation cannot be carried out (e.g. zero-mass interval)."""


class IntegrationError(NumericalError):
    """Quadrature failed or the integrand is not a normalized density."""


class SmoothingError(NumericalError):
    """Kernel normalizing denominator vanished."""


class FitError(CoarsekitError, RuntimeError):
    """A nuisance model could not be fitted."""
