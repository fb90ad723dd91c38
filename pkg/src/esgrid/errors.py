"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class EsgridError(Exception):
    """Base class for all package errors."""


class CaseError(EsgridError, ValueError):
    """A case or scenario document is malformed or violates an invariant.

    ``problems`` lists every failed check so callers can report them all at once.
    """

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n  - " + "\n  - ".join(self.problems)
        super().__init__(message)


class NumericalError(EsgridError, RuntimeError):
    """A numerical routine failed (singular system, divergence, non-convergence)."""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, mismatch: float | None = None, iterations: int | None = None):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(message)


class InfeasibleError(NumericalError):
    """An optimization problem or setpoint request has no admissible solution."""

    def __init__(self, message: str, violated: list[str] | None = None):
        self.violated = list(violated or [])
        if self.violated:
            message = message + " (violated: " + ", ".join(self.violated) + ")"
        super().__init__(message)


class DomainError(EsgridError, ValueError):
    """An argument lies outside the domain where a formula is defined."""
