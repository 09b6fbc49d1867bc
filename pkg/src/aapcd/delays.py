"""Staleness processes and the series tables the delay-tolerant analysis uses.

A :class:`DelaySchedule` produces the delay ``d_k`` of every iteration in
simulated runs. :class:`HistoryRing` keeps the recent coordinate moves so a
delayed read ``y_hat = y - sum_{h in I(k)} (y^{h+1} - y^h)`` can be rebuilt.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import zeta

from .errors import (ConfigError, HistoryEvictedError, ScheduleExhaustedError,
                     TailBoundError)

__all__ = [
    "DelaySchedule",
    "next_delay",
    "load_schedule",
    "HistoryRing",
    "HistoryRecord",
    "read_set",
    "snapshot",
    "PowerLawPmf",
    "EpsilonSpec",
    "SeriesTables",
    "c_table",
    "c_series_tail",
    "mu_delta_tables",
    "geometric_delta",
    "geometric_mu",
    "DEFAULT_TRUNCATION",
    "UNBOUNDED_HISTORY_CAP",
]

DEFAULT_TRUNCATION = 10**6
UNBOUNDED_HISTORY_CAP = 100_000
_CHUNK = 4096


@dataclass(frozen=True)
class PowerLawPmf:
    """``p_j`` proportional to ``(j + 1)^(-exponent)`` on ``j = 0..truncation``.

    ``truncation=None`` means the untruncated law (normaliser ``zeta``).
    """

    exponent: float
    truncation: int | None = DEFAULT_TRUNCATION

    def __post_init__(self):
        if not self.exponent > 1:
            raise ConfigError("power-law exponent must exceed 1 to be normalisable")

    def normaliser(self) -> float:
        if self.truncation is None:
            return float(zeta(self.exponent, 1))
        j = np.arange(self.truncation + 1, dtype=float)
        return float(np.sum(((j + 1.0) ** -self.exponent)[::-1]))

    def pmf(self, upto: int | None = None) -> np.ndarray:
        top = self.truncation if upto is None else upto
        if self.truncation is not None:
            top = min(top, self.truncation)
        j = np.arange(top + 1, dtype=float)
        return (j + 1.0) ** -self.exponent / self.normaliser()

    def survival(self) -> np.ndarray:
        """``S_j = sum_{i >= j} p_i`` for ``j = 0..truncation+1`` (last entry 0)."""
        if self.truncation is None:
            raise ConfigError("survival table needs a finite truncation")
        p = self.pmf()
        s = np.cumsum(p[::-1])[::-1]
        return np.append(s, 0.0)

    def mean(self) -> float:
        p = self.pmf()
        return float(np.sum((np.arange(len(p)) * p)[::-1]))


@dataclass
class DelaySchedule:
    """Source of the delay ``d_k``.

    mode is one of ``bounded`` (uniform on ``0..min(k, tau)``),
    ``power_law`` (``PowerLawPmf`` truncated at ``min(k, N)``),
    ``scripted`` (explicit list, clamped to ``k``), ``epsilon_sequence``
    (the deterministic ramp ``k mod (max_delay + 1)`` paired with an
    epsilon sequence for the deterministic analysis) and ``measured``
    (delays come from real worker interleaving).
    """

    mode: str = "bounded"
    tau: int = 0
    exponent: float = 5.0
    truncation: int = DEFAULT_TRUNCATION
    script: tuple = ()
    epsilon: "EpsilonSpec | None" = None
    max_delay: int = 0
    seed: int = 0
    _cache: np.ndarray = field(default=None, repr=False, compare=False)
    _rng: object = field(default=None, repr=False, compare=False)
    _survival: np.ndarray = field(default=None, repr=False, compare=False)

    MODES = ("bounded", "power_law", "scripted", "epsilon_sequence", "measured")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown delay mode {self.mode!r}")
        if self.tau < 0 or self.max_delay < 0:
            raise ConfigError("delay bounds must be nonnegative")
        if self.mode == "power_law" and self.truncation < 0:
            raise ConfigError("truncation must be nonnegative")
        if self.mode == "scripted":
            self.script = tuple(int(d) for d in self.script)
            if any(d < 0 for d in self.script):
                raise ConfigError("scripted delays must be nonnegative")
        if self.mode == "epsilon_sequence" and self.epsilon is None:
            self.epsilon = EpsilonSpec(rho=1.0, truncate=max(self.max_delay, 1))
        self.reset()

    @classmethod
    def bounded(cls, tau, seed=0):
        return cls(mode="bounded", tau=int(tau), seed=seed)

    @classmethod
    def power_law(cls, exponent=5.0, truncation=DEFAULT_TRUNCATION, seed=0):
        return cls(mode="power_law", exponent=exponent, truncation=int(truncation), seed=seed)

    @classmethod
    def scripted(cls, delays: Sequence[int]):
        return cls(mode="scripted", script=tuple(delays))

    @classmethod
    def epsilon_sequence(cls, epsilon: "EpsilonSpec", max_delay: int):
        return cls(mode="epsilon_sequence", epsilon=epsilon, max_delay=int(max_delay))

    @classmethod
    def measured(cls):
        return cls(mode="measured")

    @property
    def pmf(self) -> PowerLawPmf:
        return PowerLawPmf(self.exponent, self.truncation)

    @property
    def bound(self) -> int | None:
        """Largest delay the schedule can emit, or None when unbounded."""
        if self.mode == "bounded":
            return self.tau
        if self.mode == "scripted":
            return max(self.script, default=0)
        if self.mode == "epsilon_sequence":
            return self.max_delay
        return None

    def reset(self):
        self._cache = np.zeros(0, dtype=np.int64)
        self._rng = np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "seed": self.seed}
        if self.mode == "bounded":
            out["tau"] = self.tau
        elif self.mode == "power_law":
            out.update(exponent=self.exponent, truncation=self.truncation)
        elif self.mode == "scripted":
            out["script"] = list(self.script)
        elif self.mode == "epsilon_sequence":
            out.update(max_delay=self.max_delay, epsilon=self.epsilon.to_dict())
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DelaySchedule":
        d = dict(d)
        if "epsilon" in d and d["epsilon"] is not None:
            d["epsilon"] = EpsilonSpec.from_dict(d["epsilon"])
        if "script" in d:
            d["script"] = tuple(d["script"])
        return cls(**d)

    def sample_at(self, ks, uniforms) -> np.ndarray:
        """Map uniforms to delays for iteration indices ``ks`` (vectorised)."""
        ks = np.asarray(ks, dtype=np.int64)
        u = np.asarray(uniforms, dtype=float)
        if self.mode == "bounded":
            top = np.minimum(ks, self.tau)
            return np.minimum(np.floor(u * (top + 1)).astype(np.int64), top)
        if self.mode == "power_law":
            if self._survival is None:
                self._survival = self.pmf.survival()
            S = self._survival
            top = np.minimum(ks, self.truncation)
            tail = S[top + 1]
            target = (1.0 - u) * (S[0] - tail) + tail
            # number of j with S_j >= target, minus one
            count = np.searchsorted(-S, -target, side="right")
            return np.clip(count - 1, 0, top).astype(np.int64)
        raise ConfigError(f"mode {self.mode!r} is not sampled")

    def generate(self, count: int) -> np.ndarray:
        """Delays ``d_0 .. d_{count-1}``; deterministic given the seed."""
        if self.mode == "measured":
            raise ConfigError("measured delays come from the asynchronous engine")
        if self.mode == "scripted":
            if count > len(self.script):
                raise ScheduleExhaustedError(
                    f"scripted schedule has {len(self.script)} entries, {count} needed")
            d = np.asarray(self.script[:count], dtype=np.int64)
            return np.minimum(d, np.arange(count))
        if self.mode == "epsilon_sequence":
            k = np.arange(count, dtype=np.int64)
            return np.minimum(k % (self.max_delay + 1), k)
        have = len(self._cache)
        if count > have:
            extra = count - have
            extra = _CHUNK * math.ceil(extra / _CHUNK)
            u = self._rng.random(extra)
            ks = np.arange(have, have + extra)
            self._cache = np.concatenate([self._cache, self.sample_at(ks, u)])
        return self._cache[:count].copy()


def next_delay(schedule: DelaySchedule, k: int) -> int:
    """Delay of iteration ``k`` (``k >= 0``)."""
    if k < 0:
        raise ValueError("iteration index must be nonnegative")
    if schedule.mode == "scripted":
        if k >= len(schedule.script):
            raise ScheduleExhaustedError(f"scripted schedule exhausted at k={k}")
        return min(schedule.script[k], k)
    return int(schedule.generate(k + 1)[k])


def load_schedule(path) -> DelaySchedule:
    """Read a scripted schedule: one nonnegative integer per line."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: not an integer: {line!r}") from None
    return DelaySchedule.scripted(values)


@dataclass
class HistoryRecord:
    """One applied update: ``y[coords]`` went from ``old`` to ``new``.

    ``rows``/``dz`` hold the matching change of the margins ``A y``.
    """

    k: int
    block: int
    coords: np.ndarray
    old: np.ndarray
    new: np.ndarray
    step_sq: float
    rows: np.ndarray = None
    dz: np.ndarray = None


class HistoryRing:
    """Fixed-capacity ring of the most recent :class:`HistoryRecord` entries."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("history capacity must be positive")
        self.capacity = int(capacity)
        self._records: deque = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._records)

    @property
    def oldest(self) -> int | None:
        return self._records[0].k if self._records else None

    @property
    def newest(self) -> int | None:
        return self._records[-1].k if self._records else None

    def push(self, record: HistoryRecord):
        if self._records and record.k != self._records[-1].k + 1:
            raise ValueError("history records must be contiguous in k")
        self._records.append(record)

    def window(self, k: int, d: int):
        """Records for iterations ``k-1, k-2, ..., k-d`` (newest first)."""
        if d == 0:
            return []
        if d > k:
            raise ValueError(f"delay {d} exceeds iteration index {k}")
        if not self._records or self.newest != k - 1 or self.oldest > k - d:
            raise HistoryEvictedError(
                f"history holds iterations {self.oldest}..{self.newest}; "
                f"a read at k={k} with delay {d} needs {k - d}..{k - 1} "
                f"(capacity {self.capacity})")
        n = len(self._records)
        return [self._records[n - 1 - i] for i in range(d)]

    def delayed_margins(self, z: np.ndarray, records) -> np.ndarray:
        """``A y_hat`` from ``A y`` by undoing the margin changes of ``records``."""
        z_hat = z.copy()
        for rec in records:
            z_hat[rec.rows] -= rec.dz
        return z_hat


def read_set(k: int, d: int, policy="consistent", rng=None) -> list:
    """Iterations ``I(k)`` whose updates the delayed read misses.

    ``consistent`` misses all of ``k-1 .. k-d``; ``inconsistent`` misses a
    random subset of that interval (each independently with probability 1/2).
    """
    full = list(range(k - 1, k - d - 1, -1))
    if policy == "consistent":
        return full
    if policy == "inconsistent":
        if rng is None:
            raise ConfigError("inconsistent reads need a random generator")
        keep = rng.random(len(full)) < 0.5
        return [h for h, flag in zip(full, keep) if flag]
    raise ConfigError(f"unknown read policy {policy!r}")


def snapshot(history: HistoryRing, y: np.ndarray, k: int, d: int,
             policy="consistent", rng=None, missed=None) -> np.ndarray:
    """Rebuild the delayed iterate ``y_hat`` seen by iteration ``k``.

    The consistent policy rolls coordinates back to their stored values and
    so reproduces ``y^{k-d}`` bit for bit. Other read sets are applied as
    ``y - sum_{h in I} (y^{h+1} - y^h)``. ``missed`` overrides the read set.
    """
    records = history.window(k, d)
    y_hat = np.array(y, dtype=float, copy=True)
    if missed is None and policy == "consistent":
        for rec in records:
            y_hat[rec.coords] = rec.old
        return y_hat
    if missed is None:
        missed = read_set(k, d, policy, rng)
    by_k = {rec.k: rec for rec in records}
    for h in missed:
        if h not in by_k:
            raise ValueError(f"iteration {h} is outside the delay window of k={k}")
        rec = by_k[h]
        y_hat[rec.coords] -= rec.new - rec.old
    return y_hat


# ---------------------------------------------------------------------------
# series tables


@dataclass(frozen=True)
class EpsilonSpec:
    """Positive weights ``eps_i`` for the deterministic delay analysis.

    Either geometric ``eps_i = rho^i`` (optionally zeroed from index
    ``truncate`` on, the bounded-delay variant) or an explicit list.
    """

    rho: float | None = None
    values: tuple | None = None
    truncate: int | None = None

    def __post_init__(self):
        if (self.rho is None) == (self.values is None):
            raise ConfigError("give exactly one of rho or values")
        if self.values is not None:
            vals = tuple(float(v) for v in self.values)
            if not vals or any(v <= 0 for v in vals):
                raise ConfigError("explicit epsilon values must be positive")
            object.__setattr__(self, "values", vals)
        elif self.truncate is None:
            if not 0.0 < self.rho < 1.0:
                raise ConfigError("geometric epsilon needs rho in (0, 1)")
        else:
            if not self.rho > 0 or self.truncate < 1:
                raise ConfigError("truncated epsilon needs rho > 0 and truncate >= 1")

    @property
    def support(self) -> int | None:
        """Number of leading nonzero entries (None when infinite)."""
        if self.values is not None:
            return len(self.values)
        return self.truncate

    def eps(self, count: int) -> np.ndarray:
        i = np.arange(count, dtype=float)
        if self.values is not None:
            out = np.zeros(count)
            n = min(count, len(self.values))
            out[:n] = self.values[:n]
            return out
        out = self.rho ** i
        if self.truncate is not None:
            out[self.truncate:] = 0.0
        return out

    def to_dict(self):
        return {"rho": self.rho, "values": None if self.values is None else list(self.values),
                "truncate": self.truncate}

    @classmethod
    def from_dict(cls, d):
        vals = d.get("values")
        return cls(rho=d.get("rho"), values=None if vals is None else tuple(vals),
                   truncate=d.get("truncate"))


@dataclass
class SeriesTables:
    """Tables of ``c_k``, ``delta_i``, ``mu_d`` and ``eps_i``.

    ``c_tail`` bounds the truncation error of each ``c_k`` entry.
    """

    c: np.ndarray | None = None
    c_tail: np.ndarray | None = None
    delta: np.ndarray | None = None
    mu: np.ndarray | None = None
    eps: np.ndarray | None = None

    def mu_at(self, d: int) -> float:
        if d >= len(self.mu):
            raise IndexError(f"mu table has {len(self.mu)} entries, asked for d={d}")
        return float(self.mu[d])


def c_table(p, k_max: int, tail_tol=1e-12, max_support=10**7) -> SeriesTables:
    """``c_k = sum_{t>=1} t (t+k) p_{t+k}`` for ``k = 0..k_max``.

    ``p`` is either a :class:`PowerLawPmf` or an explicit array with
    ``p[j] = P(delay = j)``. Entries are built from the identity
    ``c_k = sum_{i>k} U_i`` with ``U_i = sum_{j>=i} j p_j`` (only
    nonnegative terms, no cancellation). For an untruncated power law the
    sum stops once the analytic tail bound falls below ``tail_tol``.
    """
    if isinstance(p, PowerLawPmf):
        if p.truncation is None:
            e = p.exponent
            if e <= 3:
                raise TailBoundError("c_0 diverges for exponents <= 3")
            Z = p.normaliser()
            # sum_{j>J} j^2 p_j <= J^(3-e) / ((e-3) Z)
            J = math.ceil(((e - 3.0) * Z * tail_tol) ** (-1.0 / (e - 3.0)))
            if J > max_support:
                raise TailBoundError(
                    f"tail tolerance {tail_tol} needs {J} terms (cap {max_support})")
            J = max(J, k_max + 1)
            probs = PowerLawPmf(e, J).pmf() * (PowerLawPmf(e, J).normaliser() / Z)
            tail = J ** (3.0 - e) / ((e - 3.0) * Z)
        else:
            probs = p.pmf()
            tail = 0.0
    else:
        probs = np.asarray(p, dtype=float)
        if np.any(probs < 0):
            raise ConfigError("probabilities must be nonnegative")
        tail = 0.0
    j = np.arange(len(probs), dtype=float)
    # U_i = sum_{j >= i} j p_j
    U = np.cumsum((j * probs)[::-1])[::-1]
    # c_k = sum_{i >= k+1} U_i
    suffix_U = np.append(np.cumsum(U[::-1])[::-1], 0.0)
    c = np.zeros(k_max + 1)
    n = min(k_max + 1, len(suffix_U) - 1)
    c[:n] = suffix_U[1:n + 1]
    return SeriesTables(c=c, c_tail=np.full(k_max + 1, tail))


def c_series_tail(tables: SeriesTables, K: int) -> float:
    """``sum_{k > K} c_k`` over the stored table (plus per-entry truncation bounds)."""
    c = tables.c
    rest = c[K + 1:]
    return float(np.sum(rest[::-1]))


def geometric_delta(rho: float, i):
    return rho ** np.asarray(i, dtype=float) / (1.0 - rho)


def geometric_mu(rho: float, d):
    d = np.asarray(d, dtype=float)
    return (rho ** -d - 1.0) / (1.0 / rho - 1.0)


def mu_delta_tables(eps: EpsilonSpec, d_max: int) -> SeriesTables:
    """``delta_i = sum_{j>=i} eps_j`` and ``mu_d = sum_{h<d} 1/eps_h``.

    Tables cover ``i, d = 0..d_max``. Entries of ``mu`` that would need a
    zero epsilon (beyond a truncated support) are ``inf``.
    """
    if d_max < 0:
        raise ValueError("d_max must be nonnegative")
    support = eps.support
    if support is None:
        # geometric, infinite support: sum explicitly then add the exact tail
        count = d_max + 1
        e = eps.eps(count)
        head = np.cumsum(e[::-1])[::-1]
        tail = eps.rho ** count / (1.0 - eps.rho)
        delta = head + tail
    else:
        e_full = eps.eps(max(support, d_max + 1))
        head = np.cumsum(e_full[::-1])[::-1]
        delta = head[:d_max + 1]
        e = e_full[:d_max + 1]
    with np.errstate(divide="ignore"):
        inv = np.where(e > 0, 1.0 / np.where(e > 0, e, 1.0), np.inf)
    mu = np.concatenate([[0.0], np.cumsum(inv)])[:d_max + 1]
    return SeriesTables(delta=np.asarray(delta, dtype=float), mu=mu, eps=e)
