"""Exception hierarchy for the Corona Stereo Pipeline.

Every error a stage can raise belongs to one of three categories, and the
category decides the CLI exit code.
"""

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class CospError(Exception):
    """Base class for all pipeline errors."""
    exit_code = EXIT_UNEXPECTED
    category = "unexpected"


class ConfigError(CospError, ValueError):
    """Invalid configuration or command-line input."""
    exit_code = EXIT_CONFIG
    category = "config"


class DataError(CospError):
    """Input data is missing, malformed or insufficient."""
    exit_code = EXIT_DATA
    category = "data"


class NumericalError(CospError, ArithmeticError):
    """A numerical procedure failed (divergence, singularity, degeneracy)."""
    exit_code = EXIT_NUMERICAL
    category = "numerical"


# Data errors
class MissingInput(DataError):
    pass


class GeodesyError(DataError, ValueError):
    pass


class InsufficientMatches(DataError):
    pass


class DegenerateGeometry(DataError):
    pass


class ThresholdNotFound(DataError):
    pass


class StripesNotFound(DataError):
    pass


class TraceGap(DataError):
    pass


class FootprintOutsideReference(DataError):
    pass


class ResidualTooLarge(DataError):
    pass


class DisjointGrids(DataError):
    pass


class NoStableTerrain(DataError):
    pass


class IncompleteRun(DataError):
    pass


class NodataUnderPoint(DataError):
    pass


# Numerical errors
class NoConvergence(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class SingularNormalMatrix(NumericalError):
    """Normal matrix is rank deficient; ``parameters`` names the culprits."""

    def __init__(self, message: str, parameters=()):
        super().__init__(message)
        self.parameters = tuple(parameters)


class DivergingResiduals(NumericalError):
    pass


class IllConditionedFit(NumericalError):
    pass


class NearParallelRays(NumericalError):
    pass


class DivergentPoint(NumericalError):
    pass


class ProjectionFailure(NumericalError):
    pass


class TileUnderconstrained(NumericalError):
    pass


def error_payload(stage: str, exc: BaseException) -> dict:
    """Machine-readable description of a stage failure."""
    category = getattr(exc, "category", "unexpected")
    payload = {
        "stage": stage,
        "error": type(exc).__name__,
        "category": category,
        "message": str(exc),
    }
    parameters = getattr(exc, "parameters", None)
    if parameters:
        payload["parameters"] = list(parameters)
    return payload


def exit_code_for(exc: BaseException) -> int:
    return getattr(exc, "exit_code", EXIT_UNEXPECTED)
