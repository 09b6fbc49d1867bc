"""Composite objectives ``F(x) = f(x) + g(x)`` over sparse datasets.

The smooth part ``f`` is a sample average (or sum, for the quadratic test
loss) of a per-sample loss of the margins ``z = A x``. The nonsmooth part
``g`` is separable over coordinates (or over fixed-size groups for the
block norm).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DimensionError, LipschitzError, ConfigError
from . import prox as _prox

__all__ = [
    "Dataset",
    "Regularizer",
    "ProblemSpec",
    "ResidualCache",
    "full_objective",
    "smooth_objective",
    "full_gradient",
    "block_gradient",
    "update_residual",
    "lipschitz_estimate",
    "load_libsvm",
    "make_classification",
    "make_regression",
    "SIGMOID_CURVATURE_BOUND",
    "RESYNC_EVERY",
]

LOSSES = ("logistic", "sigmoid", "quadratic")

# max |d^2/dz^2 1/(1+e^z)|, attained at z = +-log(2 + sqrt(3))
SIGMOID_CURVATURE_BOUND = 1.0 / (6.0 * math.sqrt(3.0))

RESYNC_EVERY = 10_000


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sparse design matrix in CSR layout plus one label per row.

    Labels are stored as float64. Classification losses require them to be
    in {-1, +1}; the quadratic test loss accepts arbitrary real targets.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    labels: np.ndarray
    n_cols: int

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        n = len(indptr) - 1
        if n < 0 or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("malformed CSR row pointer")
        if len(data) != len(indices):
            raise ValueError("CSR indices and values differ in length")
        if len(labels) != n:
            raise DimensionError(f"{len(labels)} labels for {n} rows")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n_cols):
            raise ValueError(f"column index outside [0, {self.n_cols})")
        for i in range(n):
            row = indices[indptr[i]:indptr[i + 1]]
            if len(np.unique(row)) != len(row):
                raise ValueError(f"duplicate column index in row {i}")

    @classmethod
    def from_matrix(cls, A, labels) -> "Dataset":
        """Build from a dense array or any scipy sparse matrix."""
        csr = sp.csr_matrix(A, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.indptr, csr.indices, csr.data, np.asarray(labels, dtype=float),
                   csr.shape[1])

    @property
    def n_rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def csr(self) -> sp.csr_matrix:
        cached = self.__dict__.get("_csr")
        if cached is None:
            cached = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
            self.__dict__["_csr"] = cached
        return cached

    @property
    def csc(self) -> sp.csc_matrix:
        cached = self.__dict__.get("_csc")
        if cached is None:
            cached = self.csr.tocsc()
            cached.sort_indices()
            self.__dict__["_csc"] = cached
        return cached

    def column(self, j: int):
        """Return ``(rows, values)`` of column ``j``."""
        if not 0 <= j < self.n_cols:
            raise IndexError(f"column {j} out of range [0, {self.n_cols})")
        csc = self.csc
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        return csc.indices[lo:hi], csc.data[lo:hi]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def is_binary(self) -> bool:
        return bool(np.all(np.abs(self.labels) == 1.0))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n_cols).tobytes())
        for arr in (self.indptr, self.indices, self.data, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def load_libsvm(path, n_features=None, binarize=True) -> Dataset:
    """Read a libsvm/svmlight text file (1-based feature indices).

    With ``binarize`` labels are coerced to +1 when positive and -1
    otherwise, so ``{0, 1}`` and ``{1, 2}``-style files both work for
    classification. Duplicate or unsorted indices within a row are rejected.
    """
    from sklearn.datasets import load_svmlight_file

    try:
        X, y = load_svmlight_file(str(path), n_features=n_features, zero_based=False,
                                  dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if binarize:
        y = np.where(y > 0, 1.0, -1.0)
    return Dataset.from_matrix(X, y)


def make_classification(n, m, density=1.0, seed=0, noise=0.1) -> Dataset:
    """Synthetic binary classification data with labels from a planted model."""
    rng = np.random.default_rng(seed)
    if density >= 1.0:
        A = rng.standard_normal((n, m))
    else:
        A = sp.random(n, m, density=density, random_state=rng,
                      data_rvs=rng.standard_normal, format="csr").toarray()
    A /= math.sqrt(max(1.0, density * m))
    w = rng.standard_normal(m) * (rng.random(m) < 0.3)
    margin = A @ w + noise * rng.standard_normal(n)
    labels = np.where(margin >= 0, 1.0, -1.0)
    return Dataset.from_matrix(A, labels)


def make_regression(n, m, sparsity=0.3, noise=0.05, seed=0) -> Dataset:
    """Synthetic sparse linear regression data (for lasso-type tests)."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, m)) / math.sqrt(n)
    w = rng.standard_normal(m) * (rng.random(m) < sparsity)
    b = A @ w + noise * rng.standard_normal(n)
    return Dataset.from_matrix(A, b)


@dataclass(frozen=True)
class Regularizer:
    """Separable regularizer ``g``.

    kind is one of ``none``, ``l1``, ``capped_l1`` or ``block_norm``. The
    block norm sums Euclidean norms over consecutive groups of
    ``group_size`` coordinates.
    """

    kind: str = "none"
    lam: float = 0.0
    theta_cap: float = 0.0
    group_size: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "l1", "capped_l1", "block_norm"):
            raise ConfigError(f"unknown regularizer {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.kind == "capped_l1" and not self.theta_cap > 0:
            raise ConfigError("capped_l1 needs theta_cap > 0")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")

    def value(self, x) -> float:
        """Total ``g(x)``."""
        return float(np.sum(self.values(np.asarray(x, dtype=float))))

    def values(self, x: np.ndarray) -> np.ndarray:
        """Per-coordinate (or per-group) contributions."""
        if self.kind == "none" or self.lam == 0.0:
            return np.zeros_like(x)
        if self.kind == "l1":
            return self.lam * np.abs(x)
        if self.kind == "capped_l1":
            return self.lam * np.minimum(np.abs(x), self.theta_cap)
        groups = x.reshape(-1, self.group_size)
        return self.lam * np.sqrt(np.einsum("ij,ij->i", groups, groups))

    def prox(self, y: np.ndarray, eta: float) -> np.ndarray:
        """Exact prox of ``eta * g`` restricted to the coordinates in ``y``.

        ``y`` must be a union of whole groups for the block norm.
        """
        if self.kind == "none" or self.lam == 0.0:
            return np.array(y, dtype=float, copy=True)
        if self.kind == "l1":
            return _prox.soft_threshold(y, eta * self.lam)
        if self.kind == "capped_l1":
            return _prox.capped_l1_prox(y, eta, self.lam, self.theta_cap)
        return _prox.group_soft_threshold(y, eta * self.lam, self.group_size)


@dataclass(eq=False)
class ProblemSpec:
    """Loss kind, regularizer and dataset, plus a cached Lipschitz constant."""

    loss: str
    regularizer: Regularizer
    dataset: Dataset
    lipschitz: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.loss != "quadratic" and not self.dataset.is_binary():
            raise ConfigError(f"{self.loss} loss needs labels in {{-1, +1}}")
        reg = self.regularizer
        if reg.kind == "block_norm" and self.dataset.n_cols % reg.group_size:
            raise ConfigError("block_norm group size must divide the feature count")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ConfigError("Lipschitz constant must be positive")

    @property
    def m(self) -> int:
        return self.dataset.n_cols

    @property
    def n(self) -> int:
        return self.dataset.n_rows

    @property
    def scale(self) -> float:
        """Multiplier in front of the per-sample loss sum."""
        return 1.0 if self.loss == "quadratic" else 1.0 / self.n

    @property
    def L(self) -> float:
        if self.lipschitz is None:
            self.lipschitz = lipschitz_estimate(self)
        return self.lipschitz

    def loss_values(self, z, rows=None) -> np.ndarray:
        b = self.dataset.labels if rows is None else self.dataset.labels[rows]
        return loss_values(self.loss, z, b)

    def loss_derivs(self, z, rows=None) -> np.ndarray:
        b = self.dataset.labels if rows is None else self.dataset.labels[rows]
        return loss_derivs(self.loss, z, b)


def loss_values(kind: str, z: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample loss of margins ``z`` against labels/targets ``b``."""
    if kind == "logistic":
        return np.logaddexp(0.0, -b * z)
    if kind == "sigmoid":
        return expit(-b * z)
    r = z - b
    return 0.5 * r * r


def loss_derivs(kind: str, z: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Derivative of the per-sample loss with respect to the margin."""
    if kind == "logistic":
        return -b * expit(-b * z)
    if kind == "sigmoid":
        s = expit(-b * z)
        return -b * s * (1.0 - s)
    return z - b


class ResidualCache:
    """Margins ``z = A x`` kept in sync with an owner iterate.

    ``version`` counts coordinate updates applied since construction. When
    an owner vector is attached the cache recomputes ``z`` from scratch
    every ``resync_every`` updates to bound rounding drift.
    """

    def __init__(self, dataset: Dataset, x=None, owner=None, resync_every=RESYNC_EVERY):
        self.dataset = dataset
        self.owner = owner
        self.resync_every = resync_every
        source = owner if x is None else x
        if source is None:
            self.z = np.zeros(dataset.n_rows)
        else:
            source = np.asarray(source, dtype=float)
            if source.shape != (dataset.n_cols,):
                raise DimensionError(f"expected vector of length {dataset.n_cols}")
            self.z = dataset.matvec(source)
        self.version = 0
        self._since_sync = 0

    def recompute(self, x=None):
        x = self.owner if x is None else x
        self.z = self.dataset.matvec(np.asarray(x, dtype=float))
        self._since_sync = 0

    def drift(self, x) -> float:
        """Relative difference between the cached and a fresh ``A x``."""
        fresh = self.dataset.matvec(np.asarray(x, dtype=float))
        denom = max(np.linalg.norm(fresh), np.finfo(float).tiny)
        return float(np.linalg.norm(self.z - fresh) / denom)


def update_residual(cache: ResidualCache, dataset: Dataset, j: int, delta: float) -> None:
    """Apply ``z += delta * A[:, j]`` for a coordinate move ``x_j += delta``."""
    rows, vals = dataset.column(j)
    if delta != 0.0:
        cache.z[rows] += delta * vals
    cache.version += 1
    cache._since_sync += 1
    if cache.owner is not None and cache._since_sync >= cache.resync_every:
        cache.recompute()


def _check_x(problem: ProblemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.m,):
        raise DimensionError(f"x has shape {x.shape}, expected ({problem.m},)")
    return x


def smooth_objective(problem: ProblemSpec, x, cache: ResidualCache | None = None) -> float:
    x = _check_x(problem, x)
    z = cache.z if cache is not None else problem.dataset.matvec(x)
    return problem.scale * float(np.sum(problem.loss_values(z)))


def full_objective(problem: ProblemSpec, x, cache: ResidualCache | None = None) -> float:
    """``F(x) = f(x) + g(x)``; with a cache the margins are not recomputed."""
    x = _check_x(problem, x)
    return smooth_objective(problem, x, cache) + problem.regularizer.value(x)


def full_gradient(problem: ProblemSpec, x, cache: ResidualCache | None = None) -> np.ndarray:
    x = _check_x(problem, x)
    z = cache.z if cache is not None else problem.dataset.matvec(x)
    return problem.scale * (problem.dataset.csr.T @ problem.loss_derivs(z))


def block_gradient(problem: ProblemSpec, x, block, cache: ResidualCache | None = None) -> np.ndarray:
    """Partial gradient of ``f`` over the coordinates in ``block``.

    Returns an array aligned with ``block``. Only the smooth part is
    differentiated.
    """
    x = _check_x(problem, x)
    block = np.atleast_1d(np.asarray(block, dtype=np.int64))
    if block.size == 0:
        raise ValueError("empty block")
    if block.min() < 0 or block.max() >= problem.m:
        raise DimensionError("block index out of range")
    z = cache.z if cache is not None else problem.dataset.matvec(x)
    sub = problem.dataset.csc[:, block]
    return problem.scale * (sub.T @ problem.loss_derivs(z))


def lipschitz_estimate(problem: ProblemSpec, tolerance=1e-10, max_iters=10_000) -> float:
    """Lipschitz constant of the gradient of ``f`` via power iteration.

    logistic: ``s^2 / (4 n)``; sigmoid: ``SIGMOID_CURVATURE_BOUND * s^2 / n``;
    quadratic: ``s^2``, where ``s`` is the largest singular value of ``A``.
    """
    A = problem.dataset.csr
    if problem.n == 0 or problem.m == 0:
        raise LipschitzError("empty dataset")
    rng = np.random.default_rng(0)
    v = rng.standard_normal(problem.m)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iters):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            raise LipschitzError("design matrix is zero; Lipschitz constant undefined")
        v = w / new
        if abs(new - est) <= tolerance * new:
            est = new
            break
        est = new
    else:
        raise LipschitzError(
            f"power iteration did not reach relative tolerance {tolerance} in {max_iters} "
            "iterations; pass the constant explicitly")
    sigma_sq = est
    if problem.loss == "logistic":
        return sigma_sq / (4.0 * problem.n)
    if problem.loss == "sigmoid":
        return SIGMOID_CURVATURE_BOUND * sigma_sq / problem.n
    return sigma_sq
