"""Exception hierarchy shared by every module."""


class McreError(Exception):
    """Base class for package errors."""


class DimensionError(McreError, ValueError):
    pass


class ValidationError(McreError, ValueError):
    """An object violates one of its documented invariants."""


class SolverError(McreError, RuntimeError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, message, last_residual, iterations):
        super().__init__(message)
        self.last_residual = last_residual
        self.iterations = iterations


class InvalidConfigError(McreError, ValueError):
    pass


class MissingSupportError(McreError, KeyError):
    """A state-action pair has no data behind it and strict mode is on."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing support"


class BoundUndefinedError(McreError, ValueError):
    def __init__(self, message, threshold):
        super().__init__(message)
        self.threshold = threshold


class LipschitzError(McreError, ValueError):
    pass


class ConfigurationError(McreError, ValueError):
    pass


class DatasetParseError(McreError, ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetIntegrityError(McreError, ValueError):
    def __init__(self, message, expected, found):
        super().__init__(message)
        self.expected = expected
        self.found = found


class TrainingDivergenceError(McreError, FloatingPointError):
    """Non-finite values appeared during training.

    ``state`` holds the last finite agent state when available.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class EpisodeCompleteError(McreError, RuntimeError):
    pass
