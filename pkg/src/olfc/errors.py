"""Exception types shared across the package."""

from dataclasses import dataclass


class OlfcError(Exception):
    """Base class for package errors."""


@dataclass
class ValidationIssue:
    """A single failed validation rule, with the config path it applies to."""

    rule: str
    path: str
    message: str

    def __str__(self):
        return f"[{self.rule}] {self.path}: {self.message}"


class ValidationError(OlfcError):
    """Raised when a configuration violates one or more validation rules."""

    def __init__(self, issues):
        if isinstance(issues, ValidationIssue):
            issues = [issues]
        self.issues = list(issues)
        super().__init__("\n".join(str(i) for i in self.issues))


class EquilibriumError(OlfcError):
    """Newton solve for a network equilibrium failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericAbortError(OlfcError):
    """A simulation produced a non-finite state component."""

    def __init__(self, last_valid_time=None, trajectory=None):
        if last_valid_time is None:
            super().__init__("non-finite state produced by the integration step")
        else:
            super().__init__(f"non-finite state encountered; last valid time t={last_valid_time:.6f} s")
        self.last_valid_time = last_valid_time
        self.trajectory = trajectory
