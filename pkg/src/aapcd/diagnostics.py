"""Lyapunov sequences, descent checks, stationarity residuals and rate fits.

The Lyapunov function is ``G(y^k) = F(y^k) + xi_k`` with

    xi_{k} = (L^2 / (2 C)) * sum_{i >= 0} w_i ||y^{k-i} - y^{k-i-1}||^2

for a nonincreasing weight sequence ``w``. The three delay regimes differ
only in ``w`` and ``C``:

* bounded delay ``tau``: ``w_i = tau (tau - i)`` for ``i < tau`` and
  ``C = L tau (1 + beta)``;
* stochastic unbounded delay: ``w_i = c_i`` and ``C = L (1 + beta) sqrt(c_0)``;
* deterministic delay with weights ``eps``: ``w_i = delta_i`` and
  ``C = L (1 + beta) sqrt(delta_0 / mu_{T1})``.

Writing ``eps_i = w_i - w_{i+1}`` and ``mu_d = sum_{h<d} 1/eps_h``, every
step of the solver satisfies the pathwise bound

    G(y^k) - G(y^{k+1}) >= a_k ||x^{k+1} - y^k||^2,
    a_k = 1/(2 eta) - L/2 - C mu_{d_k} / 2 - L^2 w_0 rho_k^2 / (2 C),

where ``rho_k^2 = ||y^{k+1} - y^k||^2 / ||x^{k+1} - y^k||^2``. It follows
from the smoothness upper bound, the optimality of the proximal step and a weighted
Cauchy-Schwarz bound on ``||y^k - y_hat^k||``. :func:`descent_check` tests
it record by record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats

from . import delays as _delays
from .errors import ConfigError, InsufficientDataError
from .model import ProblemSpec, full_gradient
from .trace import Trace

__all__ = [
    "LyapunovSpec",
    "bounded_spec",
    "stochastic_spec",
    "deterministic_spec",
    "lyapunov_spec_for",
    "xi_series",
    "annotate",
    "lyapunov_G",
    "descent_coefficient",
    "bounded_descent_coefficient",
    "DescentReport",
    "descent_check",
    "ExpectedDescentReport",
    "expected_descent",
    "StationarityReport",
    "stationarity_residual",
    "residual_series",
    "RateFitReport",
    "fit_rate",
    "b1_b2_constants",
    "finite_termination",
    "predicted_contraction",
]


@dataclass
class LyapunovSpec:
    """Weights ``w`` and constant ``C`` of one regime's Lyapunov function."""

    regime: str
    L: float
    C: float
    weights: np.ndarray
    beta: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0) or np.any(np.diff(self.weights) > 0):
            raise ConfigError("Lyapunov weights must be nonnegative and nonincreasing")
        if self.C < 0 or (self.C == 0 and np.any(self.weights > 0)):
            raise ConfigError("Lyapunov constant C must be positive")

    @property
    def factor(self) -> float:
        """``L^2 / (2 C)`` (zero for an empty history term)."""
        return 0.0 if self.C == 0 else self.L ** 2 / (2.0 * self.C)

    @property
    def eps(self) -> np.ndarray:
        w = np.append(self.weights, 0.0)
        return w[:-1] - w[1:]

    def mu(self, d: int) -> float:
        """``mu_d = sum_{h<d} 1/eps_h`` (infinite past the support of ``eps``)."""
        if d == 0:
            return 0.0
        eps = self.eps
        if d > len(eps) or np.any(eps[:d] <= 0):
            return math.inf
        return float(np.sum(1.0 / eps[:d]))

    def mu_table(self, d_max: int) -> np.ndarray:
        eps = self.eps
        out = np.full(d_max + 1, math.inf)
        out[0] = 0.0
        n = min(d_max, len(eps))
        with np.errstate(divide="ignore"):
            inv = np.where(eps[:n] > 0, 1.0 / np.where(eps[:n] > 0, eps[:n], 1.0), math.inf)
        out[1:n + 1] = np.cumsum(inv)
        return out


def bounded_spec(L: float, tau: int, beta: float) -> LyapunovSpec:
    i = np.arange(tau, dtype=float)
    return LyapunovSpec("bounded", L, L * tau * (1.0 + beta), tau * (tau - i), beta)


def stochastic_spec(L: float, c: np.ndarray, beta: float) -> LyapunovSpec:
    c = np.asarray(c, dtype=float)
    c = c[: np.flatnonzero(c)[-1] + 1] if np.any(c > 0) else c[:0]
    c0 = float(c[0]) if len(c) else 0.0
    return LyapunovSpec("stochastic_unbounded", L, L * (1.0 + beta) * math.sqrt(c0), c, beta)


def deterministic_spec(L: float, eps: _delays.EpsilonSpec, beta: float, T1: int,
                       rel_cut: float = 1e-18) -> LyapunovSpec:
    """Weights ``delta_i`` of an epsilon sequence.

    Infinite geometric sequences are cut where ``delta_i < rel_cut * delta_0``.
    """
    if eps.support is not None:
        length = eps.support
    else:
        length = max(int(math.ceil(math.log(rel_cut) / math.log(eps.rho))), 1)
    tables = _delays.mu_delta_tables(eps, length)
    delta = tables.delta[:length]
    mu_T1 = float(tables.mu[max(T1, 1)]) if max(T1, 1) <= length else math.inf
    C = L * (1.0 + beta) * math.sqrt(float(delta[0]) / mu_T1)
    return LyapunovSpec("deterministic_unbounded", L, C, delta, beta)


def lyapunov_spec_for(problem, config, schedule) -> LyapunovSpec:
    """The Lyapunov function matching a resolved solver configuration.

    ``problem`` may be a :class:`ProblemSpec` or just its Lipschitz constant.
    """
    L = problem.L if isinstance(problem, ProblemSpec) else float(problem)
    if config.regime == "bounded":
        tau = schedule.bound
        if tau is None:
            raise ConfigError("bounded Lyapunov function needs a delay bound")
        return bounded_spec(L, tau, config.beta)
    if config.regime == "stochastic_unbounded":
        tables = _delays.c_table(schedule.pmf, min(schedule.truncation, 10**6))
        return stochastic_spec(L, tables.c, config.beta)
    eps = config.epsilon or schedule.epsilon
    if eps is None:
        raise ConfigError("deterministic Lyapunov function needs an epsilon sequence")
    return deterministic_spec(L, eps, config.beta, config.T1 or 0)


def xi_series(step_sq: np.ndarray, spec: LyapunovSpec) -> np.ndarray:
    """``xi_{k+1}`` for each record ``k`` given the squared steps ``s_{k+1}``."""
    s = np.asarray(step_sq, dtype=float)
    R = len(s)
    if R == 0 or len(spec.weights) == 0:
        return np.zeros(R)
    w = spec.weights[:R]
    if len(w) * R > 5_000_000:
        conv = signal.oaconvolve(s, w)[:R]
        conv = np.maximum(conv, 0.0)
    else:
        conv = np.convolve(s, w)[:R]
    return spec.factor * conv


def annotate(trace: Trace, spec: LyapunovSpec) -> Trace:
    """Fill the ``xi`` and ``G`` columns of ``trace`` in place."""
    trace.xi = xi_series(trace.step_sq, spec)
    trace.G = trace.F + trace.xi
    return trace


def lyapunov_G(trace: Trace, spec: LyapunovSpec, k: int) -> float:
    """``G(y^k) = F(y^k) + xi_k`` for ``0 <= k <= len(trace)``."""
    if not 0 <= k <= len(trace):
        raise IndexError(f"trace covers y^0 .. y^{len(trace)}, asked for y^{k}")
    if k == 0:
        return float(trace.F0)
    w = spec.weights
    s = trace.step_sq[:k][::-1][: len(w)]
    return float(trace.F[k - 1] + spec.factor * float(np.dot(w[: len(s)], s)))


def descent_coefficient(spec: LyapunovSpec, eta: float, d, rho_sq=1.0):
    """``1/(2 eta) - L/2 - C mu_d / 2 - L^2 w_0 rho^2 / (2 C)`` (vectorised in ``d``)."""
    d = np.asarray(d, dtype=np.int64)
    mu = spec.mu_table(int(d.max()) if d.size else 0)[d]
    w0 = float(spec.weights[0]) if len(spec.weights) else 0.0
    with np.errstate(invalid="ignore"):
        out = 0.5 / eta - 0.5 * spec.L - 0.5 * spec.C * mu - spec.factor * w0 * np.asarray(rho_sq)
    return out


def bounded_descent_coefficient(eta: float, L: float, tau: int, beta_k: float) -> float:
    """Bounded-delay descent coefficient ``1/(2 eta) - L/2 - L tau (1 + beta_k)``."""
    return 0.5 / eta - 0.5 * L - L * tau * (1.0 + beta_k)


@dataclass
class DescentReport:
    """Violations found by :func:`descent_check`.

    kinds: ``increase`` (``G(y^{k+1}) > G(y^k) + tol``), ``quantitative``
    (the pathwise bound fails by more than ``tol`` for ``y^{k+1}`` or for
    ``x^{k+1}``) and ``uncertified`` (negative coefficient on a nonzero step,
    so the configuration is outside the certified range).
    """

    tol: float
    checked: int
    violations: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.violations)

    def by_kind(self, kind: str) -> list:
        return [v for v in self.violations if v[1] == kind]

    def summary(self) -> str:
        kinds = {}
        for _, kind, _ in self.violations:
            kinds[kind] = kinds.get(kind, 0) + 1
        detail = ", ".join(f"{n} {k}" for k, n in sorted(kinds.items()))
        return f"{self.count} violations" + (f" ({detail})" if detail else "")


def descent_check(trace: Trace, spec: LyapunovSpec, eta: float, tol: float | None = None,
                  G0: float | None = None) -> DescentReport:
    """Check every record of a simulated trace against the descent bound."""
    n = len(trace)
    G0 = trace.F0 if G0 is None else G0
    tol = 1e-12 * abs(G0) if tol is None else tol
    report = DescentReport(tol, n)
    if n == 0:
        return report
    xi = xi_series(trace.step_sq, spec)
    G = trace.F + xi
    G_prev = np.concatenate([[G0], G[:-1]])
    s_x = trace.x_step_sq
    s_y = trace.step_sq
    # G(x^{k+1}): same history, last step replaced by the x-step
    w0 = float(spec.weights[0]) if len(spec.weights) else 0.0
    G_x = trace.F_x + xi - spec.factor * w0 * (s_y - s_x)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho_sq = np.where(s_x > 0, s_y / np.where(s_x > 0, s_x, 1.0), 0.0)
    a_y = descent_coefficient(spec, eta, trace.d_k, rho_sq)
    a_x = descent_coefficient(spec, eta, trace.d_k, 1.0)
    moving = s_x > 0
    for k in np.flatnonzero(G > G_prev + tol):
        report.violations.append((int(k), "increase", float(G[k] - G_prev[k])))
    certified_y = moving & (a_y >= 0)
    gap_y = (G_prev - G) - a_y * s_x
    for k in np.flatnonzero(certified_y & (gap_y < -tol)):
        report.violations.append((int(k), "quantitative", float(gap_y[k])))
    certified_x = moving & (a_x >= 0)
    gap_x = (G_prev - G_x) - a_x * s_x
    for k in np.flatnonzero(certified_x & (gap_x < -tol) & ~(certified_y & (gap_y < -tol))):
        report.violations.append((int(k), "quantitative", float(gap_x[k])))
    for k in np.flatnonzero(moving & ~(a_y >= 0)):
        report.violations.append((int(k), "uncertified", float(a_y[k])))
    report.violations.sort(key=lambda v: (v[0], v[1]))
    return report


@dataclass
class ExpectedDescentReport:
    """Seed-averaged ``G`` at checkpoints with paired standard errors."""

    checkpoints: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    diff_mean: np.ndarray
    diff_stderr: np.ndarray
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def expected_descent(G_runs: np.ndarray, checkpoints=None, n_se: float = 2.0) -> ExpectedDescentReport:
    """Check that the seed average of ``G`` is nonincreasing.

    ``G_runs`` has one row per seed and one column per checkpoint. A
    checkpoint fails when the mean increase over the previous checkpoint
    exceeds ``n_se`` standard errors of the paired per-seed differences.
    """
    G = np.asarray(G_runs, dtype=float)
    if G.ndim != 2 or G.shape[0] < 2:
        raise InsufficientDataError("need at least two runs")
    S = G.shape[0]
    checkpoints = np.arange(G.shape[1]) if checkpoints is None else np.asarray(checkpoints)
    mean = G.mean(axis=0)
    stderr = G.std(axis=0, ddof=1) / math.sqrt(S)
    diff = np.diff(G, axis=1)
    dmean = diff.mean(axis=0)
    dse = diff.std(axis=0, ddof=1) / math.sqrt(S)
    bad = np.flatnonzero(dmean > n_se * dse + 1e-15 * np.abs(mean[:-1]))
    violations = [(int(checkpoints[i + 1]), float(dmean[i]), float(dse[i])) for i in bad]
    return ExpectedDescentReport(checkpoints, mean, stderr, dmean, dse, violations)


@dataclass
class StationarityReport:
    """Residual ``q`` per coordinate with its per-block norms.

    Blocks never updated have NaN entries and are listed in ``undefined``.
    """

    q: np.ndarray
    block_norms: np.ndarray
    undefined: list

    @property
    def max_norm(self) -> float:
        """Largest block norm among defined blocks."""
        vals = self.block_norms[~np.isnan(self.block_norms)]
        return float(vals.max()) if len(vals) else math.nan

    @property
    def norm(self) -> float:
        """Euclidean norm of ``q`` (NaN when any block is undefined)."""
        return float(np.linalg.norm(self.q))


def stationarity_residual(problem: ProblemSpec, y, last_grad, last_move, eta: float,
                          blocks=None, touched=None) -> StationarityReport:
    """``q_j = grad_j f(y) - grad_j f(y_hat) - (x_j - y_j^{old}) / eta``.

    ``last_grad`` and ``last_move`` hold, for every coordinate, the stale
    gradient and the proximal move ``x - y_old`` of the block's most recent
    update. ``touched`` marks the blocks updated at least once.
    """
    y = np.asarray(y, dtype=float)
    q = full_gradient(problem, y) - np.asarray(last_grad) - np.asarray(last_move) / eta
    if blocks is None:
        blocks = [np.array([j]) for j in range(problem.m)]
    blocks = [np.asarray(b) for b in blocks]
    touched = np.ones(len(blocks), bool) if touched is None else np.asarray(touched, bool)
    undefined = []
    norms = np.empty(len(blocks))
    for b, coords in enumerate(blocks):
        if not touched[b]:
            q[coords] = np.nan
            norms[b] = np.nan
            undefined.append(b)
        else:
            norms[b] = float(np.linalg.norm(q[coords]))
    return StationarityReport(q, norms, undefined)


def residual_series(trace: Trace, F_star: float | None = None, use_G: bool = False) -> np.ndarray:
    """``r_k = F(y^k) - F*`` for ``k = 0..len(trace)``.

    ``F*`` defaults to the best value seen in the trace. With ``use_G`` the
    Lyapunov values are used instead of ``F``.
    """
    vals = trace.G if use_G else trace.F
    series = np.concatenate([[trace.F0], vals])
    F_star = float(np.min(series)) if F_star is None else F_star
    return series - F_star


@dataclass
class RateFitReport:
    """Least-squares fit of a residual series.

    ``kind`` is ``linear`` (``log r`` against ``k``; ``rate`` is the
    per-iteration contraction) or ``sublinear`` (``log r`` against
    ``log k``; ``rate`` is the exponent).
    """

    theta: float
    kind: str
    slope: float
    intercept: float
    rate: float
    r_squared: float
    n_points: int
    b1: float | None = None
    predicted_contraction: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def fit_rate(r, theta: float, window=None, ks=None, b1: float | None = None,
             e: float | None = None) -> RateFitReport:
    """Fit the decay of ``r_k``.

    ``window`` is a ``(start, stop)`` index pair or a fraction ``f`` meaning
    the last ``f`` share of the series. Only positive residuals enter the
    fit. ``b1`` (and ``e``) are attached for comparison with the predicted
    contraction ``b1 e^2 / (1 + b1 e^2)``.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("KL exponent must lie in (0, 1]")
    r = np.asarray(r, dtype=float)
    ks = np.arange(len(r), dtype=float) if ks is None else np.asarray(ks, dtype=float)
    if window is not None:
        if np.isscalar(window):
            start = int(len(r) * (1.0 - float(window)))
            stop = len(r)
        else:
            start, stop = window
        r, ks = r[start:stop], ks[start:stop]
    keep = r > 0
    kind = "linear" if theta >= 0.5 else "sublinear"
    if kind == "sublinear":
        keep &= ks > 0
    if int(keep.sum()) < 10:
        raise InsufficientDataError(f"only {int(keep.sum())} positive residuals in the window")
    x = ks[keep] if kind == "linear" else np.log(ks[keep])
    fit = stats.linregress(x, np.log(r[keep]))
    r2 = float(fit.rvalue ** 2) if np.isfinite(fit.rvalue) else 1.0
    rate = math.exp(fit.slope) if kind == "linear" else float(fit.slope)
    pred = None
    if b1 is not None and e is not None:
        pred = predicted_contraction(b1, e)
    return RateFitReport(theta, kind, float(fit.slope), float(fit.intercept), rate, r2,
                         int(keep.sum()), b1, pred)


def predicted_contraction(b1: float, e: float) -> float:
    return b1 * e * e / (1.0 + b1 * e * e)


def finite_termination(r0: float, b1: float, e: float) -> bool:
    """Whether ``r0 < 1 / (b1 e^2)`` (the finite-termination condition for ``theta = 1``)."""
    return r0 < 1.0 / (b1 * e * e)


def b1_b2_constants(regime: str, *, eta: float, L: float, beta: float, beta_neg: float = 0.0,
                    K: int = 1, T1: int = 0, T: int | None = None, tau: int | None = None,
                    c0: float | None = None, c: float | None = None,
                    delta0: float | None = None, mu_T: float | None = None,
                    e: float | None = None, theta: float | None = None,
                    R: float | None = None, r0: float | None = None):
    """Rate constants ``(b1, b2)``.

    regime: ``bounded``, ``stochastic_unbounded``, ``deterministic_unbounded``
    or ``deterministic_bounded``. ``beta_pp = max(beta_neg, 0)`` enters as
    written. ``T`` defaults to ``tau`` in the bounded regime. ``b2`` is NaN
    unless ``e``, ``theta < 1/2``, ``R > 1`` and ``r0`` are all given.
    Raises :class:`ConfigError` when the denominator is not positive.
    """
    bpp = max(beta_neg, 0.0)
    if regime == "bounded":
        if tau is None:
            raise ConfigError("bounded regime needs tau")
        T = tau if T is None else T
        num = (2.0 * (1.0 / eta + L) ** 2 * (K + 1) + 2.0 * L * L * T1 * (1.0 + beta)
               + 2.0 * L * L * T * (1.0 + bpp))
        den = 0.5 / eta - 0.5 * L - L * tau * (1.0 + beta)
    elif regime == "stochastic_unbounded":
        if c0 is None:
            raise ConfigError("stochastic regime needs c0")
        num = (2.0 / eta ** 2 + 4.0 * L * L) + 4.0 * L * L + 4.0 * L * L * c0 * (1.0 + beta)
        den = 0.5 / eta - 0.5 * L - L * (1.0 + beta) * math.sqrt(c0)
    elif regime in ("deterministic_unbounded", "deterministic_bounded"):
        if c is None or T is None:
            raise ConfigError("deterministic regimes need c and T")
        den = (1.0 / c - 1.0) * L / 2.0
        if regime == "deterministic_unbounded":
            num = (2.0 * (1.0 / eta + L) ** 2 + 3.0 * (1.0 + beta) ** 2 * L * L * T1
                   + 2.0 * (1.0 + bpp) ** 2 * L * L * T)
        else:
            if delta0 is None or mu_T is None:
                raise ConfigError("deterministic bounded regime needs delta0 and mu_T")
            num = 3.0 * ((1.0 / eta + L) ** 2 + (1.0 + beta) ** 2 * L * L * T1
                         + (1.0 + bpp) ** 2 * L * L * T
                         + 2.0 * (1.0 + beta) ** 2 * L * L * mu_T * delta0)
    else:
        raise ConfigError(f"unknown regime {regime!r}")
    if not den > 0:
        raise ConfigError(f"infeasible: b1 denominator {den:.6g} is not positive")
    b1 = num / den
    b2 = math.nan
    if None not in (e, theta, R, r0) and theta < 0.5 and R > 1 and r0 > 0:
        p = 2.0 * theta - 1.0
        b2 = min(1.0 / (b1 * e * e * R), r0 ** p * (R ** (p / (2.0 * theta - 2.0)) - 1.0) / (1.0 - 2.0 * theta))
    return b1, b2
