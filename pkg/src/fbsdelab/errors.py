"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by fbsdelab."""


class CallbackFailure(LabError):
    """A user callback raised or returned garbage; the offending input is echoed."""

    def __init__(self, name: str, point: dict, cause: BaseException | None = None):
        self.name = name
        self.point = point
        self.cause = cause
        super().__init__(f"callback {name!r} failed at {point}: {cause!r}")


class DimensionMismatch(LabError, ValueError):
    pass


class QuadratureBudgetExceeded(LabError):
    pass


class SpanningSetInvalid(LabError, ValueError):
    pass


class SingularDiffusion(LabError):
    pass


class PicardDivergence(LabError):
    pass


class StepRejected(LabError):
    pass


class ContinuationStall(LabError):
    pass


class PathEscape(LabError):
    pass


class InsufficientCylinders(LabError, ValueError):
    pass


class InsufficientPaths(LabError, ValueError):
    pass


class DegenerateFit(LabError):
    pass


class NonTerminating(LabError):
    pass


class ConfigError(LabError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class UnknownPreset(ConfigError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class SchemaViolation(ConfigError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"{key}: {reason}")
