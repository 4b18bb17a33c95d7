"""Error hierarchy raised by the gridflex library."""

from typing import Any, Dict, List, Optional, Sequence


class GridflexError(Exception):
    """Base class for every error raised by gridflex."""


class GridParseError(GridflexError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class GridValidationError(GridflexError):
    """Carries every violated grid invariant, not just the first."""

    def __init__(self, violations: Sequence[str]):
        self.violations: List[str] = list(violations)
        super().__init__("; ".join(self.violations))


class LinearizationError(GridflexError):
    pass


class PowerFlowError(GridflexError):
    pass


class DimensionError(GridflexError, ValueError):
    pass


class FeedbackSingularityError(GridflexError):
    def __init__(self, message: str, condition: float, gains: Optional[Dict[str, Any]] = None):
        self.condition = condition
        self.gains = gains or {}
        super().__init__(message)


class SimulationError(GridflexError):
    def __init__(self, message: str, t: Optional[int] = None, scenario_id: Optional[int] = None):
        self.t = t
        self.scenario_id = scenario_id
        super().__init__(message)


class PenaltyBoundsError(GridflexError, ValueError):
    pass


class ScenarioError(GridflexError):
    pass


class OptimizationError(GridflexError):
    pass


class LineSearchError(OptimizationError):
    def __init__(self, message: str, iterate: Any = None):
        self.iterate = iterate
        super().__init__(message)


class NonFiniteObjectiveError(OptimizationError):
    pass


class HarnessStageError(GridflexError):
    def __init__(self, stage: str, message: str, artifacts: Optional[Sequence[str]] = None):
        self.stage = stage
        self.artifacts = list(artifacts or [])
        super().__init__(f"stage '{stage}' failed: {message}")


class ReportVerificationError(GridflexError):
    pass
