"""Numerical laboratory for nonautonomous second-order operators with
unbounded drift and diffusion: Lyapunov-function construction, coefficient
truncation, SDE simulation, transition-density estimation, and verification
of moment and kernel-tail bounds.
"""

from .errors import (
    CertificationError,
    CoefficientEvalError,
    ConfigurationError,
    FactorizationError,
    InputError,
    KolmolabError,
    ParameterDomainError,
    SimulationError,
)

__version__ = "0.1.0"
