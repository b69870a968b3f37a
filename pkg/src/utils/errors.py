"""
Error hierarchy for the polaron lab.

This module handles:
1. The exception classes raised by the numerical modules
2. Mapping every failure onto a command-line exit code
3. Converting exceptions into JSON-ready error payloads
"""

from typing import Any, Dict


class PolaronLabError(Exception):
    """Base class for all lab failures."""

    exit_code = 3

    def to_dict(self) -> Dict[str, Any]:
        """Return the error as a report payload."""
        return {
            "status": "error",
            "error_type": type(self).__name__,
            "error": str(self),
            "exit_code": self.exit_code,
        }


class ConfigError(PolaronLabError):
    """Invalid configuration or incompatible inputs."""

    exit_code = 2


class InvariantViolation(PolaronLabError):
    """A checked physical premise or identity does not hold."""

    exit_code = 1


class NumericalError(PolaronLabError):
    """An iterative method failed to reach its tolerance."""

    exit_code = 3


# Geometry and input problems
class EmptyBasis(ConfigError):
    pass


class DomainMismatch(ConfigError):
    pass


class IncommensurateGrids(ConfigError):
    pass


class InfeasibleSupercell(ConfigError):
    pass


# Premises and identities
class NonNeutralSource(InvariantViolation):
    pass


class ResolutionLoss(InvariantViolation):
    pass


class NoGap(InvariantViolation):
    pass


class GapClosure(InvariantViolation):
    pass


class DegenerateGroundState(InvariantViolation):
    pass


class SingularEps(InvariantViolation):
    pass


class BoxTooSmall(InvariantViolation):
    pass


class InsufficientBands(InvariantViolation):
    pass


# Convergence
class NoConvergence(NumericalError):
    pass


class CGNoConvergence(NoConvergence):
    pass


class FitFailure(NumericalError):
    pass


class NoBinding(PolaronLabError):
    """The Pekar infimum is not attained (no dielectric medium)."""

    exit_code = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"status": "no_binding", "message": str(self), "energy": 0.0}
