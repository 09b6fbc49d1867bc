"""Momentum-free competitors used in the comparisons.

``run_ascd`` is asynchronous proximal coordinate descent without
extrapolation: the accelerated solver with both momentum values set to
zero, so it shares every engine and the trace schema. ``run_dspg`` is a
synchronous mini-batch proximal gradient method.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .delays import DelaySchedule
from .diagnostics import stationarity_residual
from .errors import ConfigError, DivergenceError
from .model import ProblemSpec, full_objective
from .solver import (DIVERGENCE_FACTOR, SolveResult, SolverConfig, run_deterministic,
                     run_stochastic)
from .trace import TraceBuilder

__all__ = ["BaselineConfig", "run_ascd", "run_dspg"]


@dataclass
class BaselineConfig:
    kind: str = "ascd"
    eta: float = 0.06
    batch_size: int = 200
    iters: int = 1000
    seed: int = 0
    T1: int | None = None
    strict: bool = False
    cyclic: bool = False
    mode: str = "simulated"
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("ascd", "dspg"):
            raise ConfigError(f"unknown baseline {self.kind!r}")
        if not self.eta > 0:
            raise ConfigError("stepsize must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.iters < 0:
            raise ConfigError("iteration budget must be nonnegative")

    def solver_config(self, **overrides) -> SolverConfig:
        """The equivalent accelerated-solver configuration with zero momentum."""
        cfg = SolverConfig(eta=self.eta, beta=0.0, beta_neg=0.0, T1=self.T1, iters=self.iters,
                           seed=self.seed, strict=self.strict, mode=self.mode,
                           workers=self.workers)
        return replace(cfg, **overrides)


def run_ascd(problem: ProblemSpec, config: BaselineConfig | SolverConfig,
             schedule: DelaySchedule, x0=None, callback=None) -> SolveResult:
    """Proximal coordinate descent with stale gradients and no momentum.

    A :class:`SolverConfig` is accepted too; its momentum values are
    overridden with zero. ``callback`` is forwarded to the simulator.
    """
    if isinstance(config, BaselineConfig):
        cyclic = config.cyclic
        cfg = config.solver_config()
    else:
        cyclic = False
        cfg = replace(config, beta=0.0, beta_neg=0.0)
    if cyclic:
        return run_deterministic(problem, cfg, schedule, x0, callback)
    return run_stochastic(problem, cfg, schedule, x0, callback)


def run_dspg(problem: ProblemSpec, config: BaselineConfig, x0=None) -> SolveResult:
    """Mini-batch proximal gradient: ``x <- prox(x - eta * g_batch(x))``.

    ``g_batch`` rescales the sampled rows so that it is an unbiased
    estimate of the full gradient. Batches are drawn without replacement
    from a generator seeded with ``config.seed``; ``batch_size >= n`` uses
    the full gradient.
    """
    n, m = problem.n, problem.m
    b = min(config.batch_size, n)
    eta = config.eta
    x = np.zeros(m) if x0 is None else np.array(x0, dtype=float, copy=True)
    if x.shape != (m,):
        raise ConfigError(f"x0 must have length {m}")
    rng = np.random.default_rng(config.seed)
    A = problem.dataset.csr
    reg = problem.regularizer
    F0 = full_objective(problem, x)
    limit = DIVERGENCE_FACTOR * max(abs(F0), 1.0)
    builder = TraceBuilder()
    grad = np.zeros(m)
    move = np.zeros(m)
    t0 = time.perf_counter_ns()
    F = F0
    for k in range(config.iters):
        if b == n:
            rows = slice(None)
            sub = A
            weight = problem.scale
        else:
            rows = np.sort(rng.choice(n, size=b, replace=False))
            sub = A[rows]
            weight = problem.scale * n / b
        z = sub @ x
        grad = weight * (sub.T @ problem.loss_derivs(z, rows if b < n else None))
        x_new = reg.prox(x - eta * grad, eta)
        move = x_new - x
        x = x_new
        F = full_objective(problem, x)
        s = float(move @ move)
        builder.append(k, -1, 0, 0.0, "x", F, s, time.perf_counter_ns() - t0, F, F, s)
        if not math.isfinite(F) or F > limit:
            trace = builder.build(F0)
            raise DivergenceError(f"objective {F:g} at iteration {k} exceeds the divergence limit",
                                  result=SolveResult(x, F, trace, np.zeros((0, 3)), None, 0.0, 1,
                                                     config, []))
    duration = (time.perf_counter_ns() - t0) * 1e-9
    trace = builder.build(F0)
    trace.xi = np.zeros(len(trace))
    trace.G = trace.F.copy()
    if config.iters:
        rep = stationarity_residual(problem, x, grad, move, eta,
                                    [np.arange(m)], [True])
        residuals = np.array([[config.iters, rep.norm, rep.max_norm]])
        q = rep.q
    else:
        residuals = np.zeros((0, 3))
        q = np.full(m, np.nan)
    return SolveResult(x, F, trace, residuals, q, duration, 1, config, [])
