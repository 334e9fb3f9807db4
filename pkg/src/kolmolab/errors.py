"""Exception types shared across the package."""


class KolmolabError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(KolmolabError, ValueError):
    """A parameter violates its admissible range."""


class CoefficientEvalError(KolmolabError, RuntimeError):
    """Coefficient evaluation produced a non-finite value."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class FactorizationError(KolmolabError, RuntimeError):
    """A matrix factorization failed (e.g. non-SPD input)."""


class CertificationError(KolmolabError, RuntimeError):
    """A numerical certification step could not be completed."""


class SimulationError(KolmolabError, RuntimeError):
    """A Monte Carlo simulation failed entirely."""


class ConfigurationError(KolmolabError, ValueError):
    """Invalid solver or scenario configuration."""


class InputError(KolmolabError, ValueError):
    """Invalid data passed to a numerical routine."""
