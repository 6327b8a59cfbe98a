"""Exception hierarchy. Each class carries the error code used in reports and CLI output."""


class HeatLabError(Exception):
    code = "heatlab-error"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"status": "error", "code": self.code, "message": self.message}


class InvalidParameterError(HeatLabError):
    code = "invalid-parameter"


class DegenerateMetricError(HeatLabError):
    code = "degenerate-metric"


class OutOfDomainError(HeatLabError):
    code = "out-of-domain"


class StepRejectedError(HeatLabError):
    code = "step-rejected"

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class SingularityDetectedError(HeatLabError):
    code = "singularity-detected"

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class InvalidStateError(HeatLabError):
    code = "invalid-state"


class NoAdmissibleScaleError(HeatLabError):
    code = "no-admissible-scale"


class InvalidIntervalError(HeatLabError):
    code = "invalid-interval"


class SeriesNotConvergentError(HeatLabError):
    code = "series-not-convergent"


class InterpolationError(HeatLabError):
    code = "interpolation-error"


class SolverInstabilityError(HeatLabError):
    code = "solver-instability"


class InsufficientDataError(HeatLabError):
    code = "insufficient-data"


class DegenerateSampleError(HeatLabError):
    code = "degenerate-sample"


class InvalidWindowError(HeatLabError):
    code = "invalid-window"


class PositivityViolationError(HeatLabError):
    code = "positivity-violation"


class InvalidDensityError(HeatLabError):
    code = "invalid-density"


class ConvergenceFailureError(HeatLabError):
    code = "convergence-failure"

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UnsupportedDimensionError(HeatLabError):
    code = "unsupported-dimension"


class ScenarioError(HeatLabError):
    code = "scenario-error"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(message)
        self.line = line
        self.column = column
