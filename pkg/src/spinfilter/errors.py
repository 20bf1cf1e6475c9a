"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the command line
front end can emit a JSON error object without string matching.
"""

from __future__ import annotations


class SpinFilterError(Exception):
    code = "error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def as_dict(self) -> dict:
        return {"error": self.code, "message": str(self), "details": self.details}


class CapacityError(SpinFilterError, ValueError):
    code = "capacity"


class DomainError(SpinFilterError, ValueError):
    code = "domain"


class DimensionMismatch(SpinFilterError, ValueError):
    code = "dimension-mismatch"


class IntegrationBlowup(SpinFilterError, FloatingPointError):
    """Raised when an integrator produces a non-finite state."""

    code = "integration-blowup"

    def __init__(self, step: int, message: str | None = None, **details):
        super().__init__(message or f"non-finite state at step {step}", step=step, **details)
        self.step = step


class InvalidPropagator(SpinFilterError, ValueError):
    code = "invalid-propagator"


class NonInvertibleCoupling(SpinFilterError, ValueError):
    code = "non-invertible"


class EstimationFailed(SpinFilterError, RuntimeError):
    code = "estimation-failed"


class ConfigError(SpinFilterError, ValueError):
    code = "config"


class VersionMismatch(SpinFilterError, RuntimeError):
    code = "version-mismatch"
