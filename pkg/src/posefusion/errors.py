"""Exception hierarchy shared by all posefusion modules."""

from __future__ import annotations


class PoseFusionError(Exception):
    """Base class for every error raised by this package."""


class ZeroQuaternion(PoseFusionError, ValueError):
    pass


class IndexOutOfRange(PoseFusionError, IndexError):
    pass


class EmptyGraph(PoseFusionError, ValueError):
    pass


class SolverError(PoseFusionError):
    """Failure inside the pose-graph solver.

    ``window`` is filled in by the sliding-window driver so callers can
    report which window failed.
    """

    def __init__(self, message: str, window: int | None = None):
        super().__init__(message)
        self.window = window


class SingularSystem(SolverError):
    pass


class UnconstrainedPose(SolverError):
    def __init__(self, indices, message: str | None = None, window: int | None = None):
        self.indices = list(indices)
        if message is None:
            message = f"poses without sufficient constraints: {self.indices}"
        super().__init__(message, window)


class StreamLengthMismatch(PoseFusionError, ValueError):
    pass


class LengthMismatch(PoseFusionError, ValueError):
    pass


class DimensionMismatch(PoseFusionError, ValueError):
    pass


class NonFiniteEvaluation(PoseFusionError, ArithmeticError):
    pass


class DivergenceDetected(PoseFusionError, ArithmeticError):
    pass


class DegenerateGeometry(PoseFusionError, ValueError):
    pass


class EmptyInput(PoseFusionError, ValueError):
    pass


class ParseError(PoseFusionError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonMonotoneTimestamps(PoseFusionError, ValueError):
    pass


class SpanOutOfRange(PoseFusionError, ValueError):
    pass
