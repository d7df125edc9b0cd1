"""Smoothed SCAD penalty and the problems built from it.

The smoothed penalty replaces ``|x|`` by ``r = sqrt(x^2 + eps)`` inside the
usual three-branch SCAD formula::

    p(x) = lam * r                                   r <= lam
         = (2 gam lam r - r^2 - lam^2) / (2 (gam-1))  lam < r < gam lam
         = lam^2 (gam + 1) / 2                       r >= gam lam
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import (
    WHOLE_SPACE,
    ComponentOracle,
    DimensionError,
    FeasibleSet,
    FiniteSumProblem,
    as_point,
)


class ProxError(RuntimeError):
    """The scalar prox did not reach its tolerance."""


@dataclass(frozen=True)
class ScadParams:
    lam: float = 2.0
    gamma: float = 4.0
    eps: float = 1e-3
    rho: float = 0.01

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("SCAD lambda must be positive")
        if not self.gamma > 2:
            raise ValueError("SCAD gamma must exceed 2")
        if not self.eps > 0:
            raise ValueError("SCAD smoothing eps must be positive")
        if not self.rho >= 0:
            raise ValueError("penalty weight rho must be nonnegative")

    @property
    def weak_convexity(self) -> float:
        """Lower-curvature bound of ``(rho/2) p``: ``rho / (2 (gamma - 1))``."""
        return self.rho / (2.0 * (self.gamma - 1.0))

    @property
    def smoothness(self) -> float:
        """Gradient Lipschitz bound of ``(rho/2) p``: ``rho lam eps^{-1/2} / 2``."""
        return self.rho * self.lam / math.sqrt(self.eps) / 2.0

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "gamma": self.gamma, "eps": self.eps, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "ScadParams":
        return cls(lam=d["lambda"], gamma=d["gamma"], eps=d["eps"], rho=d["rho"])


def scad_value(x, p: ScadParams):
    """Smoothed SCAD value; works elementwise on arrays."""
    x = np.asarray(x, dtype=np.float64)
    lam, gam = p.lam, p.gamma
    r = np.sqrt(x * x + p.eps)
    out = np.where(
        r <= lam,
        lam * r,
        np.where(r < gam * lam,
                 (2.0 * gam * lam * r - r * r - lam * lam) / (2.0 * (gam - 1.0)),
                 lam * lam * (gam + 1.0) / 2.0),
    )
    return float(out) if out.ndim == 0 else out


def scad_grad(x, p: ScadParams):
    """Derivative of :func:`scad_value` with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    lam, gam = p.lam, p.gamma
    r = np.sqrt(x * x + p.eps)
    dr = np.where(r <= lam, lam, np.where(r < gam * lam, (gam * lam - r) / (gam - 1.0), 0.0))
    out = dr * x / r
    return float(out) if out.ndim == 0 else out


def scad_hess(x, p: ScadParams):
    """Second derivative of :func:`scad_value` (one-sided at the seams)."""
    x = np.asarray(x, dtype=np.float64)
    lam, gam, eps = p.lam, p.gamma, p.eps
    r = np.sqrt(x * x + eps)
    r3 = r * r * r
    out = np.where(r <= lam, lam * eps / r3,
                   np.where(r < gam * lam, (gam * lam * eps / r3 - 1.0) / (gam - 1.0), 0.0))
    return float(out) if out.ndim == 0 else out


def _scalar_terms(x: float, lam: float, gam: float, eps: float):
    # (p'(x), p''(x)) with plain floats; the prox calls this in a tight loop
    r = math.sqrt(x * x + eps)
    if r <= lam:
        return lam * x / r, lam * eps / (r * r * r)
    if r < gam * lam:
        return (gam * lam - r) / (gam - 1.0) * x / r, (gam * lam * eps / (r * r * r) - 1.0) / (gam - 1.0)
    return 0.0, 0.0


def scad_scalar_prox(lin: float, quad: float, center: float, p: ScadParams,
                     tol: float = 1e-12, max_iter: int = 100) -> float:
    """Minimize ``q(x) = (rho/2) p(x) + lin x + quad/2 (x - center)^2``.

    Safeguarded Newton: the root of ``q'`` is kept inside a bracket and any
    Newton step leaving it is replaced by bisection.  Returns ``x`` with
    ``|q'(x)| <= tol (1 + |x|)``, or the root pinned to adjacent floating
    point numbers when rounding makes that tolerance unreachable.

    Raises:
      ValueError: ``q`` is not strongly convex (``quad <= rho/(2(gamma-1))``).
      ProxError: the tolerance was not met within ``max_iter`` iterations.
    """
    lin, quad, center = float(lin), float(quad), float(center)
    w = 0.5 * p.rho
    if not quad > p.weak_convexity:
        raise ValueError(
            f"scalar prox needs quad > rho/(2(gamma-1)) = {p.weak_convexity:g}, got {quad:g}")
    if w == 0.0:
        return center - lin / quad
    lam, gam, eps = p.lam, p.gamma, p.eps

    def dq(x):
        g, h = _scalar_terms(x, lam, gam, eps)
        return w * g + lin + quad * (x - center), w * h + quad

    # |p'| <= lam, so the root of q' lies within (|lin| + w lam)/quad of center
    radius = (abs(lin) + w * lam) / quad
    lo, hi = center - radius, center + radius
    radius_pad = 1e-12 * max(1.0, abs(center), radius)
    lo -= radius_pad
    hi += radius_pad
    x = min(max(center - lin / quad, lo), hi)
    for _ in range(max_iter):
        d, h = dq(x)
        if abs(d) <= tol * (1.0 + abs(x)):
            return x
        if d > 0.0:
            hi = x
        else:
            lo = x
        if hi - lo <= 4.0 * np.spacing(max(abs(lo), abs(hi), 1e-300)):
            return x
        x_new = x - d / h
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        x = x_new
    raise ProxError(f"scalar SCAD prox did not converge in {max_iter} iterations")


def scad_prox_vec(lin, quad: float, center, p: ScadParams, tol: float = 1e-12,
                  max_iter: int = 100) -> np.ndarray:
    """Vectorised :func:`scad_scalar_prox` over independent coordinates.

    Every coordinate runs the same safeguarded Newton iteration; a coordinate
    is frozen once its own stopping test holds.
    """
    lin = np.asarray(lin, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    quad = float(quad)
    if not quad > p.weak_convexity:
        raise ValueError(
            f"scalar prox needs quad > rho/(2(gamma-1)) = {p.weak_convexity:g}, got {quad:g}")
    w = 0.5 * p.rho
    if w == 0.0:
        return center - lin / quad
    lam, gam, eps = p.lam, p.gamma, p.eps
    radius = (np.abs(lin) + w * lam) / quad
    pad = 1e-12 * np.maximum(1.0, np.maximum(np.abs(center), radius))
    lo = center - radius - pad
    hi = center + radius + pad
    x = np.clip(center - lin / quad, lo, hi)
    active = np.ones(x.shape, dtype=bool)
    for _ in range(max_iter):
        r = np.sqrt(x * x + eps)
        inner = r <= lam
        mid = ~inner & (r < gam * lam)
        dp = np.where(inner, lam, np.where(mid, (gam * lam - r) / (gam - 1.0), 0.0)) * x / r
        r3 = r * r * r
        d2p = np.where(inner, lam * eps / r3, np.where(mid, (gam * lam * eps / r3 - 1.0) / (gam - 1.0), 0.0))
        d = w * dp + lin + quad * (x - center)
        h = w * d2p + quad
        done = np.abs(d) <= tol * (1.0 + np.abs(x))
        hi = np.where(active & (d > 0.0), x, hi)
        lo = np.where(active & (d <= 0.0), x, lo)
        pinned = hi - lo <= 4.0 * np.spacing(np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1e-300))
        active &= ~(done | pinned)
        if not active.any():
            return x
        x_new = x - d / h
        bad = ~((lo < x_new) & (x_new < hi))
        x_new = np.where(bad, 0.5 * (lo + hi), x_new)
        x = np.where(active, x_new, x)
    raise ProxError(f"vectorised SCAD prox did not converge in {max_iter} iterations")


# ---------------------------------------------------------------------------
# Problems


class ScadLeastSquares(FiniteSumProblem):
    """``f_i(x) = 1/2 (a_i'x - b_i)^2 + (rho/2) sum_j p(x_j)`` for rows ``a_i`` of ``A``."""

    def __init__(self, A, b, params: ScadParams, L: float, mu: float,
                 feasible_set: FeasibleSet = WHOLE_SPACE, metadata=None):
        A = np.ascontiguousarray(A, dtype=np.float64)
        self.A = A
        self.b = as_point(b, A.shape[0], "b")
        self.params = params
        self.A.setflags(write=False)
        self.b.setflags(write=False)
        components = [_ScadRow(self, i) for i in range(A.shape[0])]
        super().__init__(components, L=L, mu=mu, feasible_set=feasible_set, metadata=metadata)

    def penalty_value(self, x) -> float:
        return 0.5 * self.params.rho * float(np.sum(scad_value(x, self.params)))

    def penalty_grad(self, x) -> np.ndarray:
        return 0.5 * self.params.rho * scad_grad(x, self.params)

    def component_value(self, i, x):
        r = self.A[i] @ x - self.b[i]
        return 0.5 * r * r + self.penalty_value(x)

    def component_grad(self, i, x):
        a = self.A[i]
        return (a @ x - self.b[i]) * a + self.penalty_grad(x)

    def value(self, x):
        r = self.A @ x - self.b
        return float(0.5 * (r @ r) / self.m) + self.penalty_value(x)

    def gradient(self, x):
        r = self.A @ x - self.b
        return self.A.T @ r / self.m + self.penalty_grad(x)


class _ScadRow(ComponentOracle):
    def __init__(self, problem: ScadLeastSquares, i: int):
        self.problem = problem
        self.i = i
        self.dimension = problem.A.shape[1]

    def value(self, x):
        return self.problem.component_value(self.i, x)

    def grad(self, x):
        return self.problem.component_grad(self.i, x)


def scad_ls_constants(A, params: ScadParams) -> tuple[float, float]:
    """``(L, mu)`` for the SCAD least-squares components."""
    A = np.asarray(A, dtype=np.float64)
    row_norm2 = np.einsum("ij,ij->i", A, A)
    L = params.smoothness + float(row_norm2.max())
    return L, params.weak_convexity


def build_scad_ls(A, b, params: ScadParams = ScadParams(),
                  feasible_set: FeasibleSet = WHOLE_SPACE) -> ScadLeastSquares:
    """SCAD-penalised least squares with ``mu = rho/(2(gamma-1))`` and
    ``L = rho lam eps^{-1/2}/2 + max_i ||a_i||^2``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError("A must be a matrix")
    b = as_point(b, name="b")
    if A.shape[0] != b.shape[0]:
        raise DimensionError(f"A has {A.shape[0]} rows but b has length {b.shape[0]}")
    if params.rho == 0:
        raise ValueError("rho = 0 gives mu = 0; set rho > 0 to obtain a valid lower-curvature bound")
    L, mu = scad_ls_constants(A, params)
    return ScadLeastSquares(A, b, params, L=L, mu=mu, feasible_set=feasible_set)


class SeparableScad(ComponentOracle):
    """``f(x) = (rho/2) sum_j p(x_j)`` on a ``dimension``-vector, with exact prox."""

    def __init__(self, dimension: int, params: ScadParams, tol: float = 1e-12):
        self.dimension = int(dimension)
        self.params = params
        self.tol = tol

    def value(self, x):
        return 0.5 * self.params.rho * float(np.sum(scad_value(x, self.params)))

    def grad(self, x):
        return 0.5 * self.params.rho * scad_grad(x, self.params)

    def prox(self, lin, quad, center, fs=WHOLE_SPACE):
        if self.dimension == 1:
            out = np.array([scad_scalar_prox(lin[0], quad, center[0], self.params, self.tol)])
        else:
            out = scad_prox_vec(lin, quad, center, self.params, self.tol)
        if not fs.is_whole_space:
            # q is 1-D strongly convex, so clipping the free minimiser is exact
            out = fs.project(out)
        return out
