"""Load-side frequency control with ES-based smart-load aggregators."""

from .errors import CaseError, ConvergenceError, DomainError, EsgridError, InfeasibleError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "CaseError",
    "ConvergenceError",
    "DomainError",
    "EsgridError",
    "InfeasibleError",
    "NumericalError",
    "__version__",
]
