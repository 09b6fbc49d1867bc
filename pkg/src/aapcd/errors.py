"""Exception types raised by the solver library."""


class DimensionError(ValueError):
    """Vector or index sizes do not match the problem."""


class ConfigError(ValueError):
    """Solver, schedule or problem parameters are invalid or infeasible."""


class DivergenceError(RuntimeError):
    """The iterate blew up (non-finite values or runaway objective)."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class HistoryEvictedError(RuntimeError):
    """The history ring no longer holds the records a delayed read needs."""


class ScheduleExhaustedError(IndexError):
    """A scripted delay schedule ran out of entries."""


class LipschitzError(RuntimeError):
    """Power iteration could not produce a usable Lipschitz constant."""


class TailBoundError(RuntimeError):
    """A series table cannot reach the requested truncation accuracy."""


class InsufficientDataError(ValueError):
    """Not enough usable points for a fit or a diagnostic."""
