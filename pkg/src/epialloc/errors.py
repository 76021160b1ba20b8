"""Exception types shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class; generic ``ValueError``/``RuntimeError`` are reserved for
programming errors.
"""

from __future__ import annotations


class EpiallocError(Exception):
    """Base class for all toolkit errors."""


class StructuralError(EpiallocError, ValueError):
    """Shape or dimension mismatch between related objects."""


class DomainError(EpiallocError, ValueError):
    """Value outside its documented domain (bounds, probability mass, ...)."""


class IntegrationError(EpiallocError, RuntimeError):
    """ODE integration produced a non-finite or unusable state.

    Carries the time at which integration first failed.
    """

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t={time:g})")
        self.time = float(time)


class NumericalError(EpiallocError, RuntimeError):
    """Linear-algebra failure (non-positive-definite matrix, ...)."""


class OptimizationError(EpiallocError, RuntimeError):
    """An optimizer failed to produce a usable result."""


class FeasibilityError(OptimizationError):
    """No feasible point was found; carries the smallest violation seen."""

    def __init__(self, message: str, best_violation: float):
        super().__init__(f"{message} (best constraint violation {best_violation:g})")
        self.best_violation = float(best_violation)


class EvaluationError(EpiallocError, RuntimeError):
    """A scenario simulation failed during policy evaluation."""

    def __init__(self, message: str, scenario_ids: list[int]):
        super().__init__(f"{message} (scenario ids {scenario_ids})")
        self.scenario_ids = list(scenario_ids)


class ConfigError(EpiallocError, ValueError):
    """Invalid experiment configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MissingArtifactError(EpiallocError, FileNotFoundError):
    """A pipeline stage requires an artifact that has not been produced."""

    def __init__(self, stage: str, path: str):
        super().__init__(
            f"missing artifact {path!r}: run the '{stage}' stage first"
        )
        self.stage = stage
        self.path = path
