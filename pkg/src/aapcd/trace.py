"""Per-iteration trace records and their CSV form.

Record ``k`` describes the iteration that produced ``y^{k+1}``: ``F`` is
``F(y^{k+1})``, ``step_sq`` is ``||y^{k+1} - y^k||^2`` and ``x_step_sq`` is
``||x^{k+1} - y^k||^2``. ``xi`` and ``G`` are filled in by
:func:`aapcd.diagnostics.annotate`.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Trace", "TraceBuilder", "COLUMNS", "EXTRA_COLUMNS", "read_trace", "write_trace"]

COLUMNS = ("k", "j_k", "d_k", "beta_k", "branch", "F", "xi", "G", "step_sq", "wallclock_ns")
EXTRA_COLUMNS = ("F_x", "F_v", "x_step_sq")

_INT_COLUMNS = ("k", "j_k", "d_k", "wallclock_ns")
_FLOAT_COLUMNS = ("beta_k", "F", "xi", "G", "step_sq", "F_x", "F_v", "x_step_sq")


@dataclass
class Trace:
    """Columnar iteration trace. ``branch`` holds ``"x"`` or ``"v"``."""

    k: np.ndarray
    j_k: np.ndarray
    d_k: np.ndarray
    beta_k: np.ndarray
    branch: np.ndarray
    F: np.ndarray
    xi: np.ndarray
    G: np.ndarray
    step_sq: np.ndarray
    wallclock_ns: np.ndarray
    F_x: np.ndarray
    F_v: np.ndarray
    x_step_sq: np.ndarray
    F0: float = float("nan")
    simulated: bool = True

    def __len__(self):
        return len(self.k)

    @classmethod
    def empty(cls, F0=float("nan"), simulated=True) -> "Trace":
        return TraceBuilder().build(F0, simulated)

    @property
    def F_before(self) -> np.ndarray:
        """``F(y^k)`` for each record (``F0`` then the shifted ``F``)."""
        return np.concatenate([[self.F0], self.F[:-1]]) if len(self) else np.zeros(0)

    def take(self, count: int) -> "Trace":
        cols = {c: getattr(self, c)[:count] for c in COLUMNS + EXTRA_COLUMNS}
        return Trace(**cols, F0=self.F0, simulated=self.simulated)

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_trace(self, buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


class TraceBuilder:
    """Append-only accumulator used inside the solver loops."""

    def __init__(self):
        self.rows = {c: [] for c in COLUMNS + EXTRA_COLUMNS}

    def append(self, k, j_k, d_k, beta_k, branch, F, step_sq, wallclock_ns, F_x, F_v, x_step_sq):
        r = self.rows
        r["k"].append(k)
        r["j_k"].append(j_k)
        r["d_k"].append(d_k)
        r["beta_k"].append(beta_k)
        r["branch"].append(branch)
        r["F"].append(F)
        r["step_sq"].append(step_sq)
        r["wallclock_ns"].append(wallclock_ns)
        r["F_x"].append(F_x)
        r["F_v"].append(F_v)
        r["x_step_sq"].append(x_step_sq)

    def __len__(self):
        return len(self.rows["k"])

    def build(self, F0, simulated=True) -> Trace:
        r = self.rows
        n = len(r["k"])
        cols = {}
        for c in _INT_COLUMNS:
            cols[c] = np.asarray(r[c], dtype=np.int64) if c in r and r[c] else np.zeros(n, np.int64)
        for c in _FLOAT_COLUMNS:
            if c in ("xi", "G"):
                cols[c] = np.full(n, np.nan)
            else:
                cols[c] = np.asarray(r[c], dtype=float).reshape(n)
        cols["branch"] = np.asarray(r["branch"], dtype="<U1").reshape(n)
        return Trace(**cols, F0=float(F0), simulated=simulated)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace(trace: Trace, out) -> None:
    """Write the trace as CSV to a path or a text stream.

    A leading ``# F0=`` comment carries ``F(y^0)``. Floats use ``repr`` so a
    read-back is exact. Simulated traces write ``wallclock_ns = 0`` so that
    reruns produce identical files.
    """
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            write_trace(trace, fh)
        return
    out.write(f"# F0={_fmt(trace.F0)}\n")
    out.write(f"# simulated={int(trace.simulated)}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COLUMNS + EXTRA_COLUMNS)
    clock = np.zeros(len(trace), np.int64) if trace.simulated else trace.wallclock_ns
    for i in range(len(trace)):
        w.writerow((
            int(trace.k[i]), int(trace.j_k[i]), int(trace.d_k[i]), _fmt(trace.beta_k[i]),
            trace.branch[i], _fmt(trace.F[i]), _fmt(trace.xi[i]), _fmt(trace.G[i]),
            _fmt(trace.step_sq[i]), int(clock[i]), _fmt(trace.F_x[i]), _fmt(trace.F_v[i]),
            _fmt(trace.x_step_sq[i]),
        ))


def read_trace(src) -> Trace:
    """Parse a CSV written by :func:`write_trace`.

    Files holding only the ten fixed columns are accepted; the missing
    extra columns come back as NaN.
    """
    if not hasattr(src, "read"):
        with open(src, newline="") as fh:
            return read_trace(fh)
    F0 = float("nan")
    simulated = True
    lines = []
    for line in src:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "F0":
                F0 = float(value)
            elif key.strip() == "simulated":
                simulated = bool(int(value))
            continue
        if line.strip():
            lines.append(line)
    if not lines:
        raise ValueError("trace has no header row")
    reader = csv.DictReader(lines)
    missing = [c for c in COLUMNS if c not in reader.fieldnames]
    if missing:
        raise ValueError(f"trace is missing columns {missing}")
    rows = list(reader)
    cols = {}
    for c in _INT_COLUMNS:
        cols[c] = np.array([int(r[c]) for r in rows], dtype=np.int64)
    for c in _FLOAT_COLUMNS:
        if c in reader.fieldnames:
            cols[c] = np.array([float(r[c]) for r in rows], dtype=float)
        else:
            cols[c] = np.full(len(rows), np.nan)
    cols["branch"] = np.array([r["branch"] for r in rows], dtype="<U1")
    return Trace(**cols, F0=F0, simulated=simulated)
