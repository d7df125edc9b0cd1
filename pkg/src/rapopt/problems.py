"""Problem containers, component oracles and feasible sets.

Two problem families are supported:

* :class:`FiniteSumProblem` -- minimize ``(1/m) sum_i f_i(x)`` over a feasible
  set, where each ``f_i`` has an ``L``-Lipschitz gradient and lower curvature
  bounded by ``-mu``.
* :class:`MultiBlockProblem` -- minimize ``sum_i f_i(x_i)`` subject to
  ``sum_i A_i x_i = b`` where the last block has an invertible square matrix
  and no set constraint.

Oracles and problems are immutable after construction.  Evaluation counters
live in :class:`EvalCounter` objects owned by individual runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse

BlockProx = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


class DimensionError(ValueError):
    """Raised when a point does not have the dimension an operation expects."""


class SingularBlockError(np.linalg.LinAlgError):
    """Raised when the last constraint block is singular or nearly so."""


def as_point(x, n: Optional[int] = None, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite 1-D float64 vector (of length ``n`` if given)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"{name} has dimension {arr.shape[0]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


@dataclass
class EvalCounter:
    """Per-run evaluation counters."""

    function_evals: int = 0
    component_grads: int = 0
    block_updates: int = 0


# ---------------------------------------------------------------------------
# Feasible sets


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Either the whole space or an axis-aligned box ``lower <= x <= upper``."""

    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.lower is None) != (self.upper is None):
            raise ValueError("a box needs both lower and upper bounds")
        if self.lower is not None:
            lo = np.asarray(self.lower, dtype=np.float64)
            hi = np.asarray(self.upper, dtype=np.float64)
            if lo.shape != hi.shape or lo.ndim != 1:
                raise DimensionError("box bounds must be vectors of equal length")
            if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
                raise ValueError("box bounds must not be NaN")
            if np.any(lo > hi):
                raise ValueError("box has lower > upper in some coordinate")
            lo.setflags(write=False)
            hi.setflags(write=False)
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @classmethod
    def whole_space(cls) -> "FeasibleSet":
        return cls()

    @classmethod
    def box(cls, lower, upper) -> "FeasibleSet":
        return cls(np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64))

    @property
    def kind(self) -> str:
        return "whole-space" if self.lower is None else "box"

    @property
    def is_whole_space(self) -> bool:
        return self.lower is None

    @property
    def is_compact(self) -> bool:
        return (
            self.lower is not None
            and bool(np.all(np.isfinite(self.lower)))
            and bool(np.all(np.isfinite(self.upper)))
        )

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.lower is None:
            return x
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        if self.lower is None:
            return True
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def to_dict(self) -> dict:
        if self.lower is None:
            return {"kind": "whole-space"}
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeasibleSet":
        if d.get("kind", "whole-space") == "whole-space":
            return cls()
        return cls.box(d["lower"], d["upper"])


WHOLE_SPACE = FeasibleSet()


def project(fs: FeasibleSet, x) -> np.ndarray:
    """Euclidean projection of ``x`` onto ``fs``."""
    return fs.project(as_point(x))


# ---------------------------------------------------------------------------
# Oracles


class ComponentOracle:
    """A smooth function of an ``n``-vector with value and gradient."""

    dimension: int

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def prox(self, lin: np.ndarray, quad: float, center: np.ndarray,
             fs: FeasibleSet = WHOLE_SPACE) -> np.ndarray:
        """argmin over ``fs`` of ``f(x) + <lin, x> + quad/2 ||x - center||^2``.

        The default implementation runs L-BFGS-B; subclasses with structure
        override it with exact formulas.
        """
        return numeric_prox(self, lin, quad, center, fs)


class FunctionOracle(ComponentOracle):
    """Oracle built from plain callables."""

    def __init__(self, value: Callable, grad: Callable, dimension: int):
        self._value = value
        self._grad = grad
        self.dimension = int(dimension)

    def value(self, x):
        return float(self._value(x))

    def grad(self, x):
        return np.asarray(self._grad(x), dtype=np.float64)


class QuadraticOracle(ComponentOracle):
    """``f(x) = 1/2 x'Qx + c'x + const`` with symmetric ``Q``."""

    def __init__(self, Q, c=None, const: float = 0.0):
        Q = np.array(Q, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise DimensionError("Q must be square")
        self.Q = 0.5 * (Q + Q.T)
        self.c = np.zeros(Q.shape[0]) if c is None else as_point(c, Q.shape[0], "c")
        self.const = float(const)
        self.dimension = Q.shape[0]
        self.Q.setflags(write=False)
        self.c.setflags(write=False)

    def value(self, x):
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.const)

    def grad(self, x):
        return self.Q @ x + self.c

    def prox(self, lin, quad, center, fs=WHOLE_SPACE):
        if not fs.is_whole_space:
            return numeric_prox(self, lin, quad, center, fs)
        H = self.Q + quad * np.eye(self.dimension)
        return np.linalg.solve(H, quad * center - lin - self.c)


def numeric_prox(oracle: ComponentOracle, lin, quad, center, fs=WHOLE_SPACE,
                 tol: float = 1e-12) -> np.ndarray:
    """Generic block prox by L-BFGS-B; the objective must be strongly convex."""

    def fun(x):
        d = x - center
        val = oracle.value(x) + lin @ x + 0.5 * quad * (d @ d)
        return val, oracle.grad(x) + lin + quad * d

    x0 = fs.project(center - lin / quad)
    bounds = None
    if not fs.is_whole_space:
        bounds = scipy.optimize.Bounds(fs.lower, fs.upper)
    res = scipy.optimize.minimize(
        fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"gtol": tol, "ftol": 1e-15, "maxiter": 10000, "maxcor": 30},
    )
    return fs.project(res.x)


# ---------------------------------------------------------------------------
# Finite-sum problems


class FiniteSumProblem:
    """``min_{x in X} (1/m) sum_i f_i(x)`` with constants ``L`` and ``mu``.

    Subclasses may override :meth:`component_grad`, :meth:`value` and
    :meth:`gradient` with vectorised versions; the defaults loop over the
    component oracles.
    """

    def __init__(self, components: Sequence[ComponentOracle], L: float, mu: float,
                 feasible_set: FeasibleSet = WHOLE_SPACE, metadata: Optional[dict] = None):
        components = list(components)
        if not components:
            raise ValueError("a finite-sum problem needs at least one component")
        n = components[0].dimension
        if any(c.dimension != n for c in components):
            raise DimensionError("all components must share one dimension")
        _check_constants(L, mu)
        if feasible_set.lower is not None and feasible_set.lower.shape[0] != n:
            raise DimensionError("feasible set dimension does not match the components")
        self.components = components
        self.m = len(components)
        self.n = n
        self.L = float(L)
        self.mu = float(mu)
        self.feasible_set = feasible_set
        self.metadata = dict(metadata or {})

    def component_value(self, i: int, x: np.ndarray) -> float:
        return self.components[i].value(x)

    def component_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.components[i].grad(x)

    def value(self, x: np.ndarray) -> float:
        return float(sum(c.value(x) for c in self.components) / self.m)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = self.components[0].grad(x).copy()
        for c in self.components[1:]:
            g += c.grad(x)
        return g / self.m


def _check_constants(L, mu):
    if not (np.isfinite(L) and np.isfinite(mu)):
        raise ValueError("L and mu must be finite")
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if mu > L:
        raise ValueError(f"mu must not exceed L (mu={mu}, L={L})")


def full_objective(p: FiniteSumProblem, x, counter: Optional[EvalCounter] = None) -> float:
    """``(1/m) sum_i f_i(x)``; charges ``m`` function evaluations."""
    x = as_point(x, p.n)
    if counter is not None:
        counter.function_evals += p.m
    return p.value(x)


def full_gradient(p: FiniteSumProblem, x, counter: Optional[EvalCounter] = None) -> np.ndarray:
    """``(1/m) sum_i grad f_i(x)``; charges ``m`` component gradients (one pass)."""
    x = as_point(x, p.n)
    if counter is not None:
        counter.component_grads += p.m
    return p.gradient(x)


class BatchProblem(FiniteSumProblem):
    """A finite-sum problem viewed as a single component ``f = (1/m) sum f_i``.

    Used by the batch variants: every component-gradient call on the view
    costs ``m`` gradient evaluations of the underlying problem.
    """

    def __init__(self, base: FiniteSumProblem):
        self.base = base
        self.components = [_AverageOracle(base)]
        self.m = 1
        self.n = base.n
        self.L = base.L
        self.mu = base.mu
        self.feasible_set = base.feasible_set
        self.metadata = dict(base.metadata)

    def component_value(self, i, x):
        return self.base.value(x)

    def component_grad(self, i, x):
        return self.base.gradient(x)

    def value(self, x):
        return self.base.value(x)

    def gradient(self, x):
        return self.base.gradient(x)


class _AverageOracle(ComponentOracle):
    def __init__(self, base: FiniteSumProblem):
        self.base = base
        self.dimension = base.n

    def value(self, x):
        return self.base.value(x)

    def grad(self, x):
        return self.base.gradient(x)


# ---------------------------------------------------------------------------
# Multi-block problems


@dataclass(eq=False)
class BlockSpec:
    """One primal block: oracle ``f_i``, set ``X_i`` and coupling matrix ``A_i``."""

    oracle: ComponentOracle
    A: np.ndarray
    feasible_set: FeasibleSet = field(default_factory=FeasibleSet)
    prox: Optional[BlockProx] = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim == 1:
            A = A.reshape(-1, 1)
        if A.ndim != 2:
            raise DimensionError("block matrix must be 2-D")
        if A.shape[1] != self.oracle.dimension:
            raise DimensionError(
                f"block matrix has {A.shape[1]} columns but the oracle has dimension "
                f"{self.oracle.dimension}")
        if self.feasible_set.lower is not None and self.feasible_set.lower.shape[0] != A.shape[1]:
            raise DimensionError("block feasible set has the wrong dimension")
        A.setflags(write=False)
        self.A = A

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def solve_prox(self, lin, quad, center) -> np.ndarray:
        """argmin over ``X_i`` of ``f_i(x) + <lin,x> + quad/2 ||x-center||^2``."""
        if self.prox is not None:
            return self.prox(lin, quad, center)
        return self.oracle.prox(lin, quad, center, self.feasible_set)


class MultiBlockProblem:
    """``min sum_i f_i(x_i)`` s.t. ``sum_{i<m} A_i x_i + A_m x_m = b``."""

    def __init__(self, blocks: Sequence[BlockSpec], last_oracle: ComponentOracle, A_last,
                 b, L: float, mu: float, metadata: Optional[dict] = None,
                 flat_oracle: Optional[ComponentOracle] = None):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("need at least one block besides the last one")
        A_last = np.asarray(A_last, dtype=np.float64)
        if A_last.ndim != 2 or A_last.shape[0] != A_last.shape[1]:
            raise DimensionError("the last block matrix must be square")
        n = A_last.shape[0]
        if last_oracle.dimension != n:
            raise DimensionError("last oracle dimension must equal the number of rows")
        if any(blk.A.shape[0] != n for blk in blocks):
            raise DimensionError("every block matrix needs n rows")
        _check_constants(L, mu)
        self.blocks = blocks
        self.last_oracle = last_oracle
        self.A_last = A_last
        self.A_last.setflags(write=False)
        self.b = as_point(b, n, "b")
        self.n = n
        self.m = len(blocks) + 1
        self.L = float(L)
        self.mu = float(mu)
        self.metadata = dict(metadata or {})
        dims = [blk.dim for blk in blocks]
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(np.int64)
        if flat_oracle is not None and flat_oracle.dimension != self.offsets[-1]:
            raise DimensionError("flat oracle must cover all non-last blocks")
        # optional oracle equal to sum_i f_i on the stacked vector, for fast metrics
        self.flat_oracle = flat_oracle

    @property
    def total_dim(self) -> int:
        return int(self.offsets[-1])

    def split(self, x_flat: np.ndarray) -> list:
        """Views of the stacked vector, one per block."""
        return [x_flat[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.blocks))]

    def stack(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([as_point(x, blk.dim) for blk, x in zip(self.blocks, xs)])

    def blocks_value(self, x_flat: np.ndarray) -> float:
        if self.flat_oracle is not None:
            return self.flat_oracle.value(x_flat)
        return float(sum(blk.oracle.value(x) for blk, x in zip(self.blocks, self.split(x_flat))))

    def blocks_grad(self, x_flat: np.ndarray) -> np.ndarray:
        if self.flat_oracle is not None:
            return self.flat_oracle.grad(x_flat)
        return np.concatenate([blk.oracle.grad(x) for blk, x in zip(self.blocks, self.split(x_flat))])

    def objective(self, xs: Sequence[np.ndarray], xm: np.ndarray) -> float:
        return float(sum(blk.oracle.value(x) for blk, x in zip(self.blocks, xs))
                     + self.last_oracle.value(xm))

    def constraint_residual(self, xs, xm) -> np.ndarray:
        r = self.A_last @ xm - self.b
        for blk, x in zip(self.blocks, xs):
            r = r + blk.A @ x
        return r


@dataclass(eq=False)
class ReformulatedProblem:
    """The problem after left-multiplying the constraint by ``A_m^{-1}``.

    ``A_blocks[i] = A_m^{-1} A_i`` and ``b = A_m^{-1} b``; ``abar`` is the
    largest block spectral norm and ``a_norm2`` the sum of squared block norms.
    """

    problem: MultiBlockProblem
    A_blocks: list
    b: np.ndarray
    abar: float
    a_norm2: float
    block_norms: np.ndarray
    _A_full: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def blocks(self):
        return self.problem.blocks

    @property
    def m(self) -> int:
        return self.problem.m

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def L(self) -> float:
        return self.problem.L

    @property
    def mu(self) -> float:
        return self.problem.mu

    @property
    def last_oracle(self) -> ComponentOracle:
        return self.problem.last_oracle

    @property
    def A_full(self) -> np.ndarray:
        """``[A_blocks[0], ..., A_blocks[m-2]]`` as one ``n x total_dim`` matrix."""
        if self._A_full is None:
            self._A_full = np.ascontiguousarray(np.hstack(self.A_blocks))
            self._A_full.setflags(write=False)
        return self._A_full

    def matvec(self, xs) -> np.ndarray:
        """``sum_i A_blocks[i] @ xs[i]``."""
        out = np.zeros(self.n)
        for Ai, x in zip(self.A_blocks, xs):
            out += Ai @ x
        return out

    def feasibility_sq(self, xs, xm) -> float:
        r = self.matvec(xs) + xm - self.b
        return float(r @ r)


def spectral_norm(A: np.ndarray, max_iter: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on ``A'A``.

    Falls back to a dense SVD when the iteration has not settled to ``tol``
    within ``max_iter`` steps (close leading singular values).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    if A.shape[1] == 1:
        return float(np.linalg.norm(A[:, 0]))
    v = np.random.default_rng(0).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new_sigma = np.sqrt(nw)
        v = w / nw
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return float(new_sigma)
        sigma = new_sigma
    return float(np.linalg.norm(A, 2))


def reformulate(p: MultiBlockProblem, rcond_threshold: float = 1e-12) -> ReformulatedProblem:
    """Factor ``A_m`` once and express the constraint with an identity last block."""
    lu, piv = scipy.linalg.lu_factor(p.A_last, check_finite=True)
    anorm = np.linalg.norm(p.A_last, 1)
    if anorm == 0.0 or np.any(np.diag(lu) == 0.0):
        raise SingularBlockError("the last constraint block is singular")
    rcond, info = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond < rcond_threshold:
        raise SingularBlockError(
            f"the last constraint block is nearly singular (reciprocal condition {rcond:.3e})")
    A_blocks = []
    for blk in p.blocks:
        Ai = scipy.linalg.lu_solve((lu, piv), blk.A)
        Ai.setflags(write=False)
        A_blocks.append(Ai)
    b = scipy.linalg.lu_solve((lu, piv), p.b)
    b.setflags(write=False)
    norms = np.array([spectral_norm(Ai) for Ai in A_blocks])
    return ReformulatedProblem(problem=p, A_blocks=A_blocks, b=b, abar=float(norms.max()),
                               a_norm2=float(np.sum(norms ** 2)), block_norms=norms)


# ---------------------------------------------------------------------------
# Matrix text formats


def write_dense(path, A) -> None:
    """Write ``A`` as ``rows cols`` followed by one whitespace-separated row per line."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    lines = [f"{A.shape[0]} {A.shape[1]}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in A)
    Path(path).write_text("\n".join(lines) + "\n")


def read_dense(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: dense header must be 'rows cols'")
        rows, cols = int(header[0]), int(header[1])
        data = [line.split() for line in fh if line.strip()]
    if len(data) != rows or any(len(r) != cols for r in data):
        raise ValueError(f"{path}: body does not match the {rows}x{cols} header")
    return np.array(data, dtype=np.float64).reshape(rows, cols)


def write_sparse(path, A) -> None:
    """Write ``A`` as ``rows cols nnz`` followed by 0-based ``i j v`` triplets."""
    coo = scipy.sparse.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}"]
    lines.extend(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}" for k in order)
    Path(path).write_text("\n".join(lines) + "\n")


def read_sparse(path) -> scipy.sparse.csc_matrix:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: sparse header must be 'rows cols nnz'")
        rows, cols, nnz = (int(v) for v in header)
        trip = [line.split() for line in fh if line.strip()]
    if len(trip) != nnz:
        raise ValueError(f"{path}: expected {nnz} triplets, found {len(trip)}")
    if nnz == 0:
        return scipy.sparse.csc_matrix((rows, cols))
    arr = np.array(trip, dtype=object)
    i = arr[:, 0].astype(np.int64)
    j = arr[:, 1].astype(np.int64)
    v = arr[:, 2].astype(np.float64)
    if i.min() < 0 or j.min() < 0 or i.max() >= rows or j.max() >= cols:
        raise ValueError(f"{path}: triplet index out of range")
    return scipy.sparse.csc_matrix((v, (i, j)), shape=(rows, cols))
