"""Exception types raised by the estimation library.

Every failure mode that callers are expected to handle gets its own class;
all of them derive from :class:`EstimationError` so a driver can catch the
whole family when mapping failures to exit codes.
"""

from __future__ import annotations


class EstimationError(Exception):
    """Base class for all errors raised by this package."""


class InvalidModelError(EstimationError):
    """A model or linear-Gaussian specification failed validation."""


class SimulationDivergedError(EstimationError):
    """A simulated state or observation became non-finite."""

    def __init__(self, time_index: int, what: str = "state"):
        self.time_index = time_index
        super().__init__(f"non-finite {what} draw at time index {time_index}")


class SingularInnovationError(EstimationError):
    """Innovation covariance could not be factorized, even after jitter."""

    def __init__(self, time_index: int):
        self.time_index = time_index
        super().__init__(f"innovation covariance singular at time index {time_index}")


class FilterDivergedError(EstimationError):
    """A filtering recursion produced a non-finite or invalid belief."""

    def __init__(self, time_index: int, detail: str = ""):
        self.time_index = time_index
        msg = f"filter diverged at time index {time_index}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class NoProgressError(EstimationError):
    """Backtracking could not find a step that reduces the objective.

    Carries the last accepted iterate so callers can inspect or keep it.
    """

    def __init__(self, iterate, message: str = "line search made no progress"):
        self.iterate = iterate
        super().__init__(message)


class IndefiniteHessianError(EstimationError):
    """A Hessian that must be sign-definite was not repairable."""


class SingularBlockError(EstimationError):
    """A block factorization hit a non-positive-definite pivot block."""

    def __init__(self, time_index: int):
        self.time_index = time_index
        super().__init__(f"singular block at time index {time_index}")


class DegenerateWeightsError(EstimationError):
    """All particle weights vanished (or became non-finite) at one step."""

    def __init__(self, time_index: int):
        self.time_index = time_index
        super().__init__(f"degenerate particle weights at time index {time_index}")


class InvalidBoundError(EstimationError):
    """A rejection-sampling density bound was missing or violated."""


class InsufficientMomentsError(EstimationError):
    """Smoothed moments are missing pieces the gradient assembly needs."""


class ZeroStepError(EstimationError):
    """Step-length selection exhausted its schedule without acceptance."""


class NonFiniteEvaluationError(EstimationError):
    """An objective probe returned a non-finite value.

    ``coordinate`` is the parameter index being probed, or None for a
    probe of the unperturbed point.
    """

    def __init__(self, coordinate: int | None = None):
        self.coordinate = coordinate
        where = "base point" if coordinate is None else f"coordinate {coordinate}"
        super().__init__(f"non-finite objective value while probing {where}")


class ConfigError(EstimationError):
    """Bad experiment or CLI configuration (maps to exit code 1)."""
