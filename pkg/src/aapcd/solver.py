"""Asynchronous accelerated proximal coordinate descent.

Each iteration takes a proximal coordinate step on a block using a
gradient evaluated at a possibly stale iterate, extrapolates the block with
a momentum that depends on how stale the read was, and keeps whichever of
the plain and the extrapolated point has the smaller objective.

Two engines are provided. The simulated engine is single threaded and
replays a :class:`~aapcd.delays.DelaySchedule`, which makes runs exactly
reproducible. The threaded engine runs several Python workers on one shared
iterate and measures the delays that actually occur.
"""

from __future__ import annotations

import itertools
import math
import queue
import sys
import threading
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import delays as _delays
from . import diagnostics
from .delays import DelaySchedule, EpsilonSpec, HistoryRecord, HistoryRing
from .errors import ConfigError, DivergenceError
from .diagnostics import stationarity_residual
from .model import ProblemSpec, ResidualCache, RESYNC_EVERY, update_residual
from .trace import Trace, TraceBuilder

__all__ = [
    "SolverConfig",
    "IterateState",
    "SolveResult",
    "StepsizeResult",
    "StepRecord",
    "stepsize_bounded",
    "momentum_bound_bounded",
    "stepsize_unbounded_stochastic",
    "momentum_cap_stochastic",
    "stepsize_deterministic",
    "momentum_cap_deterministic",
    "deterministic_constant",
    "resolve_config",
    "make_state",
    "step",
    "run_stochastic",
    "run_deterministic",
    "REGIMES",
    "DIVERGENCE_FACTOR",
]

REGIMES = ("bounded", "stochastic_unbounded", "deterministic_unbounded")
DIVERGENCE_FACTOR = 1e6


# ---------------------------------------------------------------------------
# parameter calculators


@dataclass(frozen=True)
class StepsizeResult:
    """A stepsize together with its companion momentum cap and any flags."""

    eta: float
    beta_cap: float
    flags: tuple = ()


def _check_L(L):
    if not L > 0:
        raise ConfigError("Lipschitz constant must be positive")


def _check_safety(safety):
    if not 0.0 < safety <= 1.0:
        raise ConfigError("safety factor must lie in (0, 1]")


def stepsize_bounded(L: float, T1: int, beta: float, safety: float = 0.95) -> float:
    """``safety / (L + 2 L T1 (1 + beta))``."""
    _check_L(L)
    _check_safety(safety)
    if T1 < 0 or beta < 0:
        raise ConfigError("T1 and beta must be nonnegative")
    return safety / (L + 2.0 * L * T1 * (1.0 + beta))


def momentum_bound_bounded(eta: float, L: float, tau: int) -> float:
    """Largest admissible momentum ``(1/(L tau)) (1/(2 eta) - L/2) - 1``.

    Raises :class:`ConfigError` when the bound is ``<= -1``, i.e. no
    momentum value is admissible for this stepsize and delay bound.
    """
    _check_L(L)
    if not eta > 0 or tau < 1:
        raise ConfigError("need eta > 0 and tau >= 1")
    bound = (0.5 / eta - 0.5 * L) / (L * tau) - 1.0
    if bound <= -1.0:
        raise ConfigError(
            f"infeasible: momentum bound {bound:.6g} <= -1 (eta={eta:g} too large for tau={tau})")
    return bound


def momentum_cap_stochastic(eta: float, L: float, c0: float) -> float:
    """``(1/(L sqrt(c0))) (1/(2 eta) - L/2) - 1`` (infinite when ``c0 = 0``)."""
    _check_L(L)
    if c0 <= 0:
        return math.inf
    return (0.5 / eta - 0.5 * L) / (L * math.sqrt(c0)) - 1.0


def stepsize_unbounded_stochastic(L: float, c_T1: float, beta: float, safety: float = 0.95,
                                  c0: float | None = None) -> StepsizeResult:
    """``safety / (L + 2 L sqrt(c_T1) (1 + beta))`` with its momentum cap.

    Flags: ``momentum`` when ``beta`` is not below the cap at the returned
    stepsize; ``T1`` when ``c_T1 < 9 c0 / (16 (1 + beta)^2)``, the
    threshold condition for positive momentum.
    """
    _check_L(L)
    _check_safety(safety)
    if c_T1 < 0:
        raise ConfigError("c_T1 must be nonnegative")
    eta = safety / (L + 2.0 * L * math.sqrt(c_T1) * (1.0 + beta))
    c0 = c_T1 if c0 is None else c0
    cap = momentum_cap_stochastic(eta, L, c0)
    flags = []
    if beta >= cap:
        flags.append("momentum")
    if c_T1 < 9.0 * c0 / (16.0 * (1.0 + beta) ** 2):
        flags.append("T1")
    return StepsizeResult(eta, cap, tuple(flags))


def momentum_cap_deterministic(mu_T1: float, mu_d: float, c: float, beta: float) -> float:
    """Per-iteration cap ``sqrt(mu_T1) / (c sqrt(mu_d)) (1 + beta) - 1``."""
    if mu_d <= 0:
        return math.inf
    return math.sqrt(mu_T1) / (c * math.sqrt(mu_d)) * (1.0 + beta) - 1.0


def stepsize_deterministic(L: float, delta0: float, mu_T1: float, beta: float, c: float,
                           mu_d: float | None = None) -> StepsizeResult:
    """``c / (L + 2 sqrt(delta0 mu_T1) L (1 + beta))`` for ``c`` in (0, 1).

    ``beta_cap`` is the per-iteration momentum cap at delay ``mu_d`` (or at
    ``T1`` when ``mu_d`` is omitted). Flag ``T1`` is raised when
    ``mu_T1 < 4 c^2 mu_d / (1 + beta)^2``.
    """
    _check_L(L)
    if not 0.0 < c < 1.0:
        raise ConfigError("c must lie strictly between 0 and 1")
    if delta0 < 0 or mu_T1 < 0:
        raise ConfigError("series table entries must be nonnegative")
    eta = c / (L + 2.0 * math.sqrt(delta0 * mu_T1) * L * (1.0 + beta))
    mu_d = mu_T1 if mu_d is None else mu_d
    cap = momentum_cap_deterministic(mu_T1, mu_d, c, beta)
    flags = ("T1",) if mu_T1 < 4.0 * c * c * mu_d / (1.0 + beta) ** 2 else ()
    return StepsizeResult(eta, cap, flags)


def deterministic_constant(L: float, beta: float, delta0: float, mu_T1: float) -> float:
    """Lyapunov constant ``C = L (1 + beta) sqrt(delta0 / mu_T1)`` (``mu_T1`` floored at ``mu_1``)."""
    return L * (1.0 + beta) * math.sqrt(delta0 / mu_T1)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SolverConfig:
    """Solver parameters.

    ``eta`` may be ``"auto"``, in which case :func:`resolve_config` derives it
    from the regime's stepsize formula with the ``safety`` factor. ``T1`` of
    ``None`` means ``ceil(tau / 2)`` (bounded regime). ``blocks`` defaults to
    one block per coordinate (or per group for block-norm regularizers).
    """

    eta: float | str = "auto"
    beta: float = 0.8
    beta_neg: float = -0.08
    T1: int | None = None
    blocks: Sequence | None = None
    iters: int = 1000
    seed: int = 0
    regime: str = "bounded"
    safety: float = 0.95
    read_policy: str = "consistent"
    history_capacity: int | None = None
    epsilon: EpsilonSpec | None = None
    strict: bool = True
    residual_every: int = 0
    workers: int = 1
    mode: str = "simulated"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.eta != "auto" and not (isinstance(self.eta, (int, float)) and self.eta > 0):
            raise ConfigError("eta must be positive or 'auto'")
        if not (self.beta_neg > -1.0 and self.beta_neg <= 0.0 <= self.beta):
            raise ConfigError("momentum values must satisfy -1 < beta_neg <= 0 <= beta")
        if self.T1 is not None and self.T1 < 0:
            raise ConfigError("T1 must be nonnegative")
        if self.iters < 0:
            raise ConfigError("iteration budget must be nonnegative")
        _check_safety(self.safety)
        if self.read_policy not in ("consistent", "inconsistent"):
            raise ConfigError(f"unknown read policy {self.read_policy!r}")
        if self.mode not in ("simulated", "real"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("need at least one worker")

    def to_dict(self) -> dict:
        return {
            "eta": self.eta, "beta": self.beta, "beta_neg": self.beta_neg, "T1": self.T1,
            "blocks": None if self.blocks is None else [list(map(int, b)) for b in self.blocks],
            "iters": self.iters, "seed": self.seed, "regime": self.regime,
            "safety": self.safety, "read_policy": self.read_policy,
            "history_capacity": self.history_capacity,
            "epsilon": None if self.epsilon is None else self.epsilon.to_dict(),
            "strict": self.strict, "residual_every": self.residual_every,
            "workers": self.workers, "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if d.get("epsilon") is not None:
            d["epsilon"] = EpsilonSpec.from_dict(d["epsilon"])
        if d.get("blocks") is not None:
            d["blocks"] = [tuple(b) for b in d["blocks"]]
        return cls(**d)


def _default_blocks(problem: ProblemSpec):
    size = problem.regularizer.group_size if problem.regularizer.kind == "block_norm" else 1
    return [np.arange(s, s + size) for s in range(0, problem.m, size)]


def _check_blocks(problem: ProblemSpec, blocks):
    blocks = [np.asarray(b, dtype=np.int64).ravel() for b in blocks]
    if not blocks or any(b.size == 0 for b in blocks):
        raise ConfigError("blocks must be nonempty")
    flat = np.concatenate(blocks)
    if flat.min() < 0 or flat.max() >= problem.m or len(flat) != problem.m \
            or len(np.unique(flat)) != problem.m:
        raise ConfigError("blocks must partition the coordinates 0..m-1")
    reg = problem.regularizer
    if reg.kind == "block_norm" and reg.group_size > 1:
        for b in blocks:
            groups = b // reg.group_size
            if len(b) % reg.group_size or \
                    np.any(np.bincount(groups - groups.min()) % reg.group_size):
                raise ConfigError("blocks must be unions of whole regularizer groups")
            order = np.argsort(b, kind="stable")
            if not np.array_equal(b[order], b):
                raise ConfigError("block-norm blocks must list coordinates in ascending order")
    return blocks


def _series_for(config: SolverConfig, schedule: DelaySchedule, d_max: int):
    """Tables needed by the unbounded regimes (None for the bounded one)."""
    if config.regime == "stochastic_unbounded":
        if schedule.mode != "power_law":
            raise ConfigError("the stochastic unbounded regime needs a power-law schedule")
        return _delays.c_table(schedule.pmf, max(d_max, 1))
    if config.regime == "deterministic_unbounded":
        eps = config.epsilon or schedule.epsilon
        if eps is None:
            raise ConfigError("the deterministic regime needs an epsilon sequence")
        return _delays.mu_delta_tables(eps, max(d_max, 1))
    return None


def resolve_config(problem: ProblemSpec, config: SolverConfig, schedule: DelaySchedule):
    """Fill in ``auto`` values and check the regime's feasibility conditions.

    Returns ``(config, warnings)``. Infeasible settings raise
    :class:`ConfigError` when ``config.strict`` and are returned as warning
    strings otherwise.
    """
    L = problem.L
    notes = []
    tau = schedule.bound
    if config.regime == "bounded" and tau is None:
        if schedule.mode == "measured":
            tau = max(config.workers - 1, 1)
            notes.append(f"measured delays: tau taken as workers-1 = {tau} for the bounds")
        else:
            raise ConfigError("the bounded regime needs a schedule with a delay bound")
    T1 = config.T1
    if T1 is None:
        if config.regime != "bounded":
            raise ConfigError("T1 must be given for the unbounded regimes")
        T1 = math.ceil(tau / 2)
    d_max = tau if tau is not None else (config.history_capacity or _delays.UNBOUNDED_HISTORY_CAP)
    d_max = max(d_max, T1)
    beta, beta_neg = config.beta, config.beta_neg

    if config.regime == "bounded":
        eta = config.eta
        if eta == "auto":
            eta = stepsize_bounded(L, max(T1, tau), beta, config.safety)
        if eta >= 1.0 / (L + 2.0 * L * T1 * (1.0 + beta)):
            notes.append(f"eta={eta:g} is not below 1/(L + 2 L T1 (1 + beta))")
        if tau >= 1:
            cap = (0.5 / eta - 0.5 * L) / (L * tau) - 1.0
            if beta >= cap:
                notes.append(f"beta={beta:g} is not below the momentum bound {cap:.6g}")
    elif config.regime == "stochastic_unbounded":
        tables = _series_for(config, schedule, T1)
        c0, cT1 = float(tables.c[0]), float(tables.c[T1])
        eta = config.eta
        if eta == "auto":
            eta = stepsize_unbounded_stochastic(L, c0, beta, config.safety, c0).eta
        if eta >= 1.0 / (L + 2.0 * L * math.sqrt(cT1) * (1.0 + beta)):
            notes.append(f"eta={eta:g} is not below 1/(L + 2 L sqrt(c_T1) (1 + beta))")
        cap = momentum_cap_stochastic(eta, L, c0)
        if beta >= cap:
            notes.append(f"beta={beta:g} is not below the momentum cap {cap:.6g}")
    else:
        tables = _series_for(config, schedule, d_max if tau is not None else T1)
        delta0, mu_T1 = float(tables.delta[0]), float(tables.mu[T1])
        eta = config.eta
        if eta == "auto":
            eta = stepsize_deterministic(L, delta0, mu_T1, beta, config.safety).eta
        c = eta * (L + 2.0 * math.sqrt(delta0 * mu_T1) * L * (1.0 + beta))
        if c >= 1.0:
            notes.append(f"eta={eta:g} is not below the deterministic stepsize bound (c={c:.4g})")
        elif tau is not None:
            for d in range(T1 + 1, tau + 1):
                mu_d = float(tables.mu[d])
                cap = momentum_cap_deterministic(mu_T1, mu_d, c, beta)
                if beta_neg >= cap:
                    notes.append(f"beta_neg={beta_neg:g} exceeds the cap {cap:.6g} at delay {d}")
                    break

    if notes and config.strict:
        raise ConfigError("; ".join(notes))
    resolved = replace(config, eta=float(eta), T1=int(T1))
    return resolved, notes


# ---------------------------------------------------------------------------
# iterate state and the single step


class _BlockData:
    """Precomputed rows and dense column slab for one coordinate block."""

    __slots__ = ("coords", "rows", "M", "labels", "first", "size")

    def __init__(self, problem: ProblemSpec, coords: np.ndarray):
        csc = problem.dataset.csc[:, coords]
        rows = np.unique(csc.indices)
        self.coords = coords
        self.first = int(coords[0])
        self.size = len(coords)
        dense = csc[rows, :].toarray() if len(rows) else np.zeros((0, len(coords)))
        if len(rows) == problem.n:
            self.rows = slice(None)
        else:
            self.rows = rows
        self.M = np.ascontiguousarray(dense)
        self.labels = problem.dataset.labels[self.rows]


@dataclass
class IterateState:
    """Mutable solver state.

    ``z`` holds the margins ``A y``, ``ell`` the per-sample losses at ``z``
    and ``loss_sum``/``g_sum`` the running totals behind ``F``.
    """

    problem: ProblemSpec
    y: np.ndarray
    z: np.ndarray
    ell: np.ndarray
    loss_sum: float
    g_sum: float
    k: int = 0
    K: int = 1
    blocks: list = field(default_factory=list)
    last_grad: np.ndarray = None
    last_move: np.ndarray = None
    touched: np.ndarray = None
    since_sync: int = 0

    @property
    def F(self) -> float:
        return self.problem.scale * self.loss_sum + self.g_sum

    def resync(self):
        """Recompute margins and totals from ``y``."""
        self.z = self.problem.dataset.matvec(self.y)
        self.ell = self.problem.loss_values(self.z)
        self.loss_sum = float(np.sum(self.ell))
        self.g_sum = self.problem.regularizer.value(self.y)
        self.since_sync = 0


def make_state(problem: ProblemSpec, x0=None, blocks=None) -> IterateState:
    y = np.zeros(problem.m) if x0 is None else np.array(x0, dtype=float, copy=True)
    if y.shape != (problem.m,):
        raise ConfigError(f"x0 must have length {problem.m}")
    blocks = _check_blocks(problem, blocks if blocks is not None else _default_blocks(problem))
    state = IterateState(problem, y, None, None, 0.0, 0.0, K=len(blocks),
                         blocks=[_BlockData(problem, b) for b in blocks],
                         last_grad=np.zeros(problem.m), last_move=np.zeros(problem.m),
                         touched=np.zeros(len(blocks), dtype=bool))
    state.resync()
    return state


@dataclass
class StepRecord:
    """What one step did; ``dz`` is the margin change on ``rows``."""

    j: int
    d: int
    beta_k: float
    branch: str
    F: float
    F_x: float
    F_v: float
    step_sq: float
    x_step_sq: float
    old: np.ndarray
    new: np.ndarray
    dz: np.ndarray


def _g_block(reg, v):
    return float(np.sum(reg.values(v))) if reg.kind != "none" and reg.lam != 0.0 else 0.0


def step(state: IterateState, config: SolverConfig, j: int, d: int = 0,
         y_hat=None, z_hat=None) -> StepRecord:
    """One iteration on block ``j`` with a gradient read at delay ``d``.

    The stale point is given either as the vector ``y_hat`` or directly by
    its margins ``z_hat``; with neither the current iterate is used. The
    state is updated in place.
    """
    problem = state.problem
    blk = state.blocks[j]
    eta = float(config.eta)
    if z_hat is None:
        z_hat = state.z if y_hat is None else problem.dataset.matvec(np.asarray(y_hat, float))
    rows = blk.rows
    loss = problem.loss
    grad = problem.scale * (blk.M.T @ _derivs(loss, z_hat[rows], blk.labels))
    coords = blk.coords
    y_old = state.y[coords]
    reg = problem.regularizer
    x_new = reg.prox(y_old - eta * grad, eta)
    u = x_new - y_old
    x_step_sq = float(u @ u)
    beta_k = config.beta if d <= config.T1 else config.beta_neg

    z_rows = state.z[rows]
    ell_rows = state.ell[rows]
    ell_sum_rows = float(np.sum(ell_rows))
    g_old = _g_block(reg, y_old)
    dz_x = blk.M @ u
    ell_x = _values(loss, z_rows + dz_x, blk.labels)
    F_base = state.F
    F_x = F_base + problem.scale * (float(np.sum(ell_x)) - ell_sum_rows) + (_g_block(reg, x_new) - g_old)
    if beta_k == 0.0 or x_step_sq == 0.0:
        v_new, F_v, dz_v, ell_v = x_new, F_x, dz_x, ell_x
    else:
        v_new = x_new + beta_k * u
        dz_v = blk.M @ (v_new - y_old)
        ell_v = _values(loss, z_rows + dz_v, blk.labels)
        F_v = F_base + problem.scale * (float(np.sum(ell_v)) - ell_sum_rows) + (_g_block(reg, v_new) - g_old)
    if F_v < F_x:
        branch, new, dz, ell_new = "v", v_new, dz_v, ell_v
    else:
        branch, new, dz, ell_new = "x", x_new, dz_x, ell_x
    F_new = F_v if branch == "v" else F_x

    state.y[coords] = new
    state.z[rows] = z_rows + dz
    state.ell[rows] = ell_new
    state.loss_sum += float(np.sum(ell_new)) - ell_sum_rows
    state.g_sum += _g_block(reg, new) - g_old
    state.last_grad[coords] = grad
    state.last_move[coords] = u
    state.touched[j] = True
    state.k += 1
    state.since_sync += 1
    moved = new - y_old
    if state.since_sync >= RESYNC_EVERY:
        state.resync()
    return StepRecord(j, d, beta_k, branch, F_new, F_x, F_v, float(moved @ moved), x_step_sq,
                      y_old, new, dz)


def _values(kind, z, b):
    if kind == "quadratic":
        r = z - b
        return 0.5 * r * r
    if kind == "logistic":
        return np.logaddexp(0.0, -b * z)
    return expit(-b * z)


def _derivs(kind, z, b):
    if kind == "quadratic":
        return z - b
    if kind == "logistic":
        return -b * expit(-b * z)
    s = expit(-b * z)
    return -b * s * (1.0 - s)


# ---------------------------------------------------------------------------
# results and engines


@dataclass
class SolveResult:
    """Final iterate and the run's trace.

    ``residuals`` holds ``(k, ||q||_2, max block norm)`` rows recorded every
    ``config.residual_every`` iterations and once at the end.
    """

    x: np.ndarray
    F: float
    trace: Trace
    residuals: np.ndarray
    q: np.ndarray
    duration: float
    workers: int
    config: SolverConfig
    warnings: list = field(default_factory=list)

    @property
    def residual(self) -> float:
        """``||q||_2`` at the end of the run (NaN if some block was never updated)."""
        return float(self.residuals[-1, 1]) if len(self.residuals) else math.nan


def _residual_row(state: IterateState, eta: float, k: int):
    rep = stationarity_residual(state.problem, state.y, state.last_grad, state.last_move, eta,
                                [b.coords for b in state.blocks], state.touched)
    return (k, rep.norm, rep.max_norm), rep.q


def _divergence_limit(F0: float) -> float:
    return DIVERGENCE_FACTOR * max(abs(F0), 1.0)


def _history_capacity(config: SolverConfig, schedule: DelaySchedule, K: int) -> int:
    if config.history_capacity is not None:
        return config.history_capacity
    tau = schedule.bound
    if tau is not None:
        return 4 * (tau + K)
    return _delays.UNBOUNDED_HISTORY_CAP


def _simulate(problem, config, schedule, x0, cyclic, callback=None, annotate=True) -> SolveResult:
    config, notes = resolve_config(problem, config, schedule)
    for note in notes:
        warnings.warn(note, stacklevel=3)
    state = make_state(problem, x0, config.blocks)
    K = state.K
    R = config.iters
    F0 = state.F
    limit = _divergence_limit(F0)
    ring = HistoryRing(_history_capacity(config, schedule, K))
    delays_k = schedule.generate(R) if R else np.zeros(0, np.int64)
    ss = np.random.SeedSequence(config.seed)
    block_rng, read_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if cyclic:
        choice = np.arange(R) % K
    else:
        choice = block_rng.integers(0, K, size=R)
    builder = TraceBuilder()
    residuals = []
    t0 = time.perf_counter_ns()
    every = config.residual_every
    inconsistent = config.read_policy == "inconsistent"
    for k in range(R):
        d = int(delays_k[k])
        j = int(choice[k])
        if d:
            records = ring.window(k, d)
            if inconsistent:
                missed = set(_delays.read_set(k, d, "inconsistent", read_rng))
                records = [r for r in records if r.k in missed]
            z_hat = ring.delayed_margins(state.z, records)
        else:
            z_hat = state.z
        rec = step(state, config, j, d, z_hat=z_hat)
        ring.push(HistoryRecord(k, j, state.blocks[j].coords, rec.old, rec.new, rec.step_sq,
                                state.blocks[j].rows, rec.dz))
        builder.append(k, j, d, rec.beta_k, rec.branch, rec.F, rec.step_sq,
                       time.perf_counter_ns() - t0, rec.F_x, rec.F_v, rec.x_step_sq)
        if not math.isfinite(rec.F) or rec.F > limit:
            trace = builder.build(F0, simulated=True)
            raise DivergenceError(
                f"objective {rec.F:g} at iteration {k} exceeds the divergence limit {limit:g}",
                result=SolveResult(state.y.copy(), rec.F, trace, np.zeros((0, 3)), None,
                                   0.0, 1, config, notes))
        if callback is not None:
            callback(k, state.y)
        if every and (k + 1) % every == 0:
            residuals.append(_residual_row(state, config.eta, k + 1)[0])
    duration = (time.perf_counter_ns() - t0) * 1e-9
    state.resync()
    row, q = _residual_row(state, config.eta, R)
    if not residuals or residuals[-1][0] != R:
        residuals.append(row)
    trace = builder.build(F0, simulated=True)
    result = SolveResult(state.y.copy(), state.F, trace, np.array(residuals, dtype=float).reshape(-1, 3),
                         q, duration, 1, config, notes)
    if annotate:
        _annotate(result, problem, schedule)
    return result


def _annotate(result: SolveResult, problem, schedule):
    try:
        spec = diagnostics.lyapunov_spec_for(problem, result.config, schedule)
    except ConfigError:
        return
    diagnostics.annotate(result.trace, spec)


def run_stochastic(problem: ProblemSpec, config: SolverConfig, schedule: DelaySchedule,
                   x0=None, callback=None) -> SolveResult:
    """Blocks drawn uniformly at random.

    ``config.mode == "real"`` runs ``config.workers`` threads on a shared
    iterate with measured delays; otherwise the schedule is replayed by the
    single-threaded simulator, which calls ``callback(k, y)`` with the new
    iterate after every iteration (``y`` is live state; copy it to keep it).
    """
    if config.mode == "real":
        return _run_threads(problem, config, schedule, x0)
    if schedule.mode == "measured":
        raise ConfigError("measured delays need mode='real'")
    return _simulate(problem, config, schedule, x0, cyclic=False, callback=callback)


def run_deterministic(problem: ProblemSpec, config: SolverConfig, schedule: DelaySchedule,
                      x0=None, callback=None) -> SolveResult:
    """Blocks visited round-robin, so every ``K`` consecutive iterations cover all blocks."""
    if config.mode == "real" or schedule.mode == "measured":
        raise ConfigError("the deterministic variant runs in simulated mode only")
    return _simulate(problem, config, schedule, x0, cyclic=True, callback=callback)


# ---------------------------------------------------------------------------
# threaded engine


class _Published:
    """Global iteration counter. ``ticket`` hands out ``k``; ``count`` reads it."""

    def __init__(self):
        self._tickets = itertools.count()
        self._done = []

    def ticket(self) -> int:
        return next(self._tickets)

    def publish(self, k: int):
        self._done.append(k)

    def count(self) -> int:
        return len(self._done)


def _run_threads(problem, config, schedule, x0) -> SolveResult:
    config, notes = resolve_config(problem, config, schedule)
    for note in notes:
        warnings.warn(note, stacklevel=3)
    state = make_state(problem, x0, config.blocks)
    blocks = state.blocks
    K = state.K
    R = config.iters
    F0 = state.F
    limit = _divergence_limit(F0)
    y = state.y
    counter = _Published()
    records: queue.Queue = queue.Queue(maxsize=1024)
    failure = []
    stop = threading.Event()
    eta = float(config.eta)
    reg = problem.regularizer
    dataset = problem.dataset
    seeds = np.random.SeedSequence(config.seed).spawn(config.workers)
    t0 = time.perf_counter_ns()

    def worker(wid):
        rng = np.random.default_rng(seeds[wid])
        view = y.copy()
        cache = ResidualCache(dataset, view)
        try:
            while not stop.is_set():
                i = counter.count()
                fresh = y.copy()
                changed = np.flatnonzero(fresh != view)
                for c in changed:
                    update_residual(cache, dataset, int(c), float(fresh[c] - view[c]))
                view = fresh
                j = int(rng.integers(K))
                blk = blocks[j]
                z = cache.z
                rows = blk.rows
                grad = problem.scale * (blk.M.T @ _derivs(problem.loss, z[rows], blk.labels))
                k = counter.ticket()
                if k >= R:
                    break
                d = k - i
                # the prox is anchored at the current shared block; only the gradient is stale
                y_old = y[blk.coords].copy()
                x_new = reg.prox(y_old - eta * grad, eta)
                u = x_new - y_old
                beta_k = config.beta if d <= config.T1 else config.beta_neg
                v_new = x_new + beta_k * u
                # F at the worker's view with the block replaced by each candidate
                view_blk = view[blk.coords]
                f_view = problem.scale * float(np.sum(problem.loss_values(z)))
                g_rest = reg.value(view) - _g_block(reg, view_blk)
                z_rows = z[rows]
                base = problem.scale * float(np.sum(_values(problem.loss, z_rows, blk.labels)))
                F_x = (f_view - base + problem.scale * float(np.sum(
                    _values(problem.loss, z_rows + blk.M @ (x_new - view_blk), blk.labels)))
                    + g_rest + _g_block(reg, x_new))
                if beta_k == 0.0 or not np.any(u):
                    F_v = F_x
                else:
                    F_v = (f_view - base + problem.scale * float(np.sum(
                        _values(problem.loss, z_rows + blk.M @ (v_new - view_blk), blk.labels)))
                        + g_rest + _g_block(reg, v_new))
                new, F_new, branch = (v_new, F_v, "v") if F_v < F_x else (x_new, F_x, "x")
                y[blk.coords] = new
                counter.publish(k)
                moved = new - y_old
                records.put((k, j, d, beta_k, branch, F_new, float(moved @ moved),
                             time.perf_counter_ns() - t0, F_x, F_v, float(u @ u),
                             blk.coords, grad, u))
                if not math.isfinite(F_new) or F_new > limit:
                    failure.append(f"objective {F_new:g} at iteration {k} exceeds the divergence limit")
                    stop.set()
        except Exception as exc:  # surfaced after join
            failure.append(exc)
            stop.set()

    collected = []

    def collector():
        while True:
            item = records.get()
            if item is None:
                return
            collected.append(item)

    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    try:
        sink = threading.Thread(target=collector, daemon=True)
        sink.start()
        threads = [threading.Thread(target=worker, args=(w,), daemon=True)
                   for w in range(config.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        records.put(None)
        sink.join()
    finally:
        sys.setswitchinterval(old_interval)
    duration = (time.perf_counter_ns() - t0) * 1e-9
    collected.sort(key=lambda r: r[0])
    builder = TraceBuilder()
    for r in collected:
        builder.append(*r[:11])
        coords = r[11]
        state.last_grad[coords] = r[12]
        state.last_move[coords] = r[13]
        state.touched[r[1]] = True
    state.k = len(collected)
    state.resync()
    trace = builder.build(F0, simulated=False)
    if failure:
        err = failure[0]
        if isinstance(err, Exception):
            raise err
        raise DivergenceError(err, result=SolveResult(y.copy(), state.F, trace, np.zeros((0, 3)),
                                                      None, duration, config.workers, config, notes))
    row, q = _residual_row(state, eta, state.k)
    result = SolveResult(y.copy(), state.F, trace, np.array([row], dtype=float), q, duration,
                         config.workers, config, notes)
    _annotate(result, problem, schedule)
    return result
