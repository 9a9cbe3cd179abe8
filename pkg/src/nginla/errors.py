"""Exception hierarchy."""


class NginlaError(Exception):
    """Base class for all engine errors."""


class NotPositiveDefinite(NginlaError):
    def __init__(self, message="matrix is not positive definite", column=None):
        super().__init__(message)
        self.column = column


class DimensionMismatch(NginlaError, ValueError):
    pass


class InvalidHyper(NginlaError, ValueError):
    pass


class UnsupportedStructure(NginlaError):
    pass


class MaxIterationsExceeded(NginlaError):
    pass


class NonFiniteObjective(NginlaError):
    pass


class ObjectiveDecrease(NginlaError):
    """Raised by plain Newton (no damping) when a full step lowers the target."""


class ExplorationFailed(NginlaError):
    pass


class DegenerateGrid(NginlaError):
    pass


class DisjointSupport(NginlaError, ValueError):
    pass


class NonFiniteTarget(NginlaError):
    pass


class ZeroDenominator(NginlaError, ZeroDivisionError):
    pass


class ConfigError(NginlaError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
