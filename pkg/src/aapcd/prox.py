"""Exact proximal operators for separable regularizers.

Scalar entry points take a :class:`ProxQuery`; the vectorised helpers are
what the solvers call on a whole coordinate block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

__all__ = [
    "ProxQuery",
    "TIE_RTOL",
    "prox_l1",
    "prox_capped_l1",
    "prox_oracle_grid",
    "prox_objective",
    "soft_threshold",
    "capped_l1_prox",
    "group_soft_threshold",
    "l1_penalty",
    "capped_l1_penalty",
    "zero_penalty",
]

# Objective values closer than this (relative) count as a tie; ties go to
# the candidate with the smaller magnitude.
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ProxQuery:
    y: float
    eta: float
    lam: float = 0.0
    theta_cap: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("prox step eta must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.theta_cap > 0:
            raise ConfigError("theta_cap must be positive")


def zero_penalty(query: ProxQuery) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: np.zeros_like(np.asarray(x, dtype=float))


def l1_penalty(query: ProxQuery) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: query.lam * np.abs(x)


def capped_l1_penalty(query: ProxQuery) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: query.lam * np.minimum(np.abs(x), query.theta_cap)


def prox_objective(penalty, query: ProxQuery, x):
    """``(x - y)^2 / (2 eta) + g(x)`` for a penalty evaluator ``g``."""
    x = np.asarray(x, dtype=float)
    return (x - query.y) ** 2 / (2.0 * query.eta) + penalty(x)


def soft_threshold(y, t):
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)


def capped_l1_prox(y, eta, lam, theta_cap):
    """Vectorised minimiser of ``(x - y)^2/(2 eta) + lam * min(|x|, theta_cap)``.

    Two regional candidates are compared: the soft-threshold clamped into
    ``[-theta_cap, theta_cap]`` and the projection of ``y`` onto
    ``|x| >= theta_cap``.
    """
    y = np.asarray(y, dtype=float)
    inner = np.clip(soft_threshold(y, eta * lam), -theta_cap, theta_cap)
    outer = np.sign(y) * np.maximum(np.abs(y), theta_cap)
    h_in = (inner - y) ** 2 / (2.0 * eta) + lam * np.minimum(np.abs(inner), theta_cap)
    h_out = (outer - y) ** 2 / (2.0 * eta) + lam * np.minimum(np.abs(outer), theta_cap)
    tol = TIE_RTOL * np.maximum(np.maximum(np.abs(h_in), np.abs(h_out)), 1e-300)
    pick_outer = h_out < h_in - tol
    tie = np.abs(h_out - h_in) <= tol
    # |outer| >= |inner| always, so a tie keeps the inner candidate
    pick_outer &= ~tie
    return np.where(pick_outer, outer, inner)


def group_soft_threshold(y, t, group_size):
    """Prox of ``t * sum_groups ||x_group||_2`` on consecutive groups."""
    y = np.asarray(y, dtype=float)
    groups = y.reshape(-1, group_size)
    norms = np.sqrt(np.einsum("ij,ij->i", groups, groups))
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > t, 1.0 - t / norms, 0.0)
    return (groups * shrink[:, None]).reshape(y.shape)


def prox_l1(query: ProxQuery) -> float:
    """``sign(y) * max(|y| - eta*lam, 0)``."""
    return float(soft_threshold(query.y, query.eta * query.lam))


def prox_capped_l1(query: ProxQuery) -> float:
    return float(capped_l1_prox(query.y, query.eta, query.lam, query.theta_cap))


def prox_oracle_grid(penalty, query: ProxQuery, lo=None, hi=None, step=1e-4) -> float:
    """Brute-force prox: minimise the prox objective over a uniform grid.

    ``penalty`` maps a :class:`ProxQuery` to a vectorised evaluator of
    ``g`` (see :func:`l1_penalty`). The default bounds
    ``[-(2|y|+1), 2|y|+1]`` always enclose the minimiser. Ties (within
    :data:`TIE_RTOL`) resolve to the smallest ``|x|``.
    """
    if lo is None or hi is None:
        half = 2.0 * abs(query.y) + 1.0
        lo = -half if lo is None else lo
        hi = half if hi is None else hi
    if not step > 0 or not lo < hi:
        raise ValueError("empty grid: need lo < hi and step > 0")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    grid = lo + step * np.arange(count)
    obj = prox_objective(penalty(query), query, grid)
    best = obj.min()
    near = np.flatnonzero(obj <= best + TIE_RTOL * max(abs(best), 1e-300))
    return float(grid[near[np.argmin(np.abs(grid[near]))]])
