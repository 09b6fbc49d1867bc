"""Asynchronous accelerated proximal coordinate descent for composite problems."""

from .delays import DelaySchedule, EpsilonSpec, PowerLawPmf
from .errors import (ConfigError, DimensionError, DivergenceError, HistoryEvictedError,
                     InsufficientDataError, LipschitzError, ScheduleExhaustedError,
                     TailBoundError)
from .model import Dataset, ProblemSpec, Regularizer, full_objective, block_gradient
from .solver import SolveResult, SolverConfig, run_deterministic, run_stochastic

__version__ = "0.1.0"
