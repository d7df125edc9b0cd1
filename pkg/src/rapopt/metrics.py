"""Stationarity measures, solution certificates and run records."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .problems import (
    FeasibleSet,
    FiniteSumProblem,
    ReformulatedProblem,
    as_point,
)

CSV_COLUMNS = ("pass", "objective", "grad_norm_sq", "feasibility_sq", "wall_ms")


class SolverDivergence(RuntimeError):
    """An inner solver failed to reach its tolerance."""


@dataclass
class StationarityReport:
    grad_norm_sq: float
    ncone_dist_sq: float
    strong_gap: Optional[float] = None
    feasibility_sq: Optional[float] = None
    kkt_block_sq: Optional[float] = None
    lambda_residual_sq: Optional[float] = None


def ncone_distance_sq(g, fs: FeasibleSet, x, tol: float = 1e-12) -> float:
    """Squared distance from ``g`` to ``-N_X(x)``.

    For a box the normal cone at ``x`` splits by coordinate: ``{0}`` where
    the coordinate is interior, ``(-inf, 0]`` at an active lower bound and
    ``[0, inf)`` at an active upper bound.  Negating, ``-N`` absorbs
    ``g_j >= 0`` at a lower bound and ``g_j <= 0`` at an upper bound.
    """
    g = as_point(g, name="g")
    x = as_point(x, g.shape[0])
    if fs.is_whole_space:
        return float(g @ g)
    if not fs.contains(x, tol):
        raise ValueError("x lies outside the feasible set")
    at_lo = x <= fs.lower
    at_hi = x >= fs.upper
    r = g.copy()
    # a degenerate coordinate (lower == upper) has a full-line normal cone
    both = at_lo & at_hi
    r[both] = 0.0
    lo_only = at_lo & ~at_hi
    hi_only = at_hi & ~at_lo
    r[lo_only] = np.minimum(g[lo_only], 0.0)
    r[hi_only] = np.maximum(g[hi_only], 0.0)
    return float(r @ r)


def strong_gap(p: FiniteSumProblem, x, grad: Optional[np.ndarray] = None) -> float:
    """``max_{z in X} <grad f(x), x - z>`` over a compact box, in closed form."""
    fs = p.feasible_set
    if not fs.is_compact:
        raise ValueError("the strong gap needs a compact (finite box) feasible set")
    x = as_point(x, p.n)
    g = p.gradient(x) if grad is None else as_point(grad, p.n, "grad")
    # the minimiser of <g, z> over the box sits at a vertex chosen by sign(g)
    z = np.where(g > 0, fs.lower, fs.upper)
    return max(0.0, float(g @ (x - z)))


def stationarity_report(p: FiniteSumProblem, x) -> StationarityReport:
    x = as_point(x, p.n)
    g = p.gradient(x)
    gap = strong_gap(p, x, g) if p.feasible_set.is_compact else None
    return StationarityReport(grad_norm_sq=float(g @ g),
                              ncone_dist_sq=ncone_distance_sq(g, p.feasible_set, x),
                              strong_gap=gap)


def multiblock_kkt(rp: ReformulatedProblem, xs: Sequence[np.ndarray], xm,
                   centers: Optional[Sequence[np.ndarray]] = None,
                   center_m: Optional[np.ndarray] = None) -> StationarityReport:
    """KKT residuals of the reformulated problem at ``(xs, xm)``.

    The multiplier is estimated as ``lam = -grad f_m(xm)``.  When the proximal
    centres of the subproblem that produced the point are given, the
    multiplier instead follows the subproblem's own optimality condition,
    ``lam = -(grad f_m(xm) + 2 mu (xm - center_m))``, and the reported
    ``lambda_residual_sq`` measures ``||grad f_m(xm) + lam||^2`` for it.
    """
    xm = as_point(xm, rp.n, "xm")
    gm = rp.last_oracle.grad(xm)
    if center_m is not None:
        lam = -(gm + 2.0 * rp.mu * (xm - as_point(center_m, rp.n, "center_m")))
    else:
        lam = -gm
    lam_res = gm + lam
    kkt = 0.0
    grad_sq = 0.0
    for i, (blk, Ai, x) in enumerate(zip(rp.blocks, rp.A_blocks, xs)):
        x = as_point(x, blk.dim)
        gi = blk.oracle.grad(x)
        grad_sq += float(gi @ gi)
        kkt += ncone_distance_sq(gi + Ai.T @ lam, blk.feasible_set, x)
    feas = rp.feasibility_sq(xs, xm)
    return StationarityReport(grad_norm_sq=grad_sq, ncone_dist_sq=kkt, feasibility_sq=feas,
                              kkt_block_sq=kkt, lambda_residual_sq=float(lam_res @ lam_res))


# ---------------------------------------------------------------------------
# High-accuracy subproblem oracle and certificates


def prox_gradient_solve(p: FiniteSumProblem, center, x0=None, tol: float = 1e-12,
                        max_iter: int = 200000) -> np.ndarray:
    """Solve ``min_X f(x) + (3 mu/2)||x - center||^2`` to a gradient-mapping
    norm below ``tol (1 + ||x||)``.

    The subproblem has an ``(L + 3mu)``-Lipschitz gradient and is
    ``2mu``-strongly convex, so accelerated projected gradient runs with the
    fixed step ``1/(L + 3mu)`` and momentum ``(sqrt(q) - 1)/(sqrt(q) + 1)``,
    ``q = (L + 3mu)/(2mu)``, restarting whenever the step opposes the
    momentum.  No function values are compared, so progress is not limited
    by rounding in the objective.  This deterministic method is independent
    of the randomized solvers it is used to check.
    """
    center = as_point(center, p.n, "center")
    fs = p.feasible_set
    weight = 3.0 * p.mu
    lip = p.L + weight
    q = lip / (2.0 * p.mu)
    beta = (math.sqrt(q) - 1.0) / (math.sqrt(q) + 1.0)
    x = fs.project(center.copy() if x0 is None else as_point(x0, p.n, "x0"))
    v = x.copy()
    for _ in range(max_iter):
        gv = p.gradient(v) + weight * (v - center)
        x_new = fs.project(v - gv / lip)
        mapping = (v - x_new) * lip
        if math.sqrt(float(mapping @ mapping)) <= tol * (1.0 + float(np.linalg.norm(v))):
            return v
        if float(mapping @ (x_new - x)) < 0.0:
            # the step opposes the momentum: restart from the new point
            v = x_new.copy()
        else:
            v = x_new + beta * (x_new - x)
        x = x_new
    raise SolverDivergence(f"proximal gradient did not reach tol={tol} in {max_iter} iterations")


def eps_delta_certificate(p: FiniteSumProblem, x, center, solver=prox_gradient_solve,
                          tol: float = 1e-12) -> tuple[float, float, np.ndarray]:
    """Pair ``x`` with the subproblem solution at ``center``.

    Returns ``(eps_hat, delta_hat, x_hat)`` where ``x_hat`` minimises
    ``f + (3 mu/2)||. - center||^2``, ``eps_hat`` is the squared distance of
    ``grad f(x_hat)`` to ``-N_X(x_hat)`` and ``delta_hat = ||x - x_hat||^2``.
    """
    x = as_point(x, p.n)
    x_hat = solver(p, center, tol=tol)
    eps_hat = ncone_distance_sq(p.gradient(x_hat), p.feasible_set, x_hat)
    d = x - x_hat
    return eps_hat, float(d @ d), x_hat


# ---------------------------------------------------------------------------
# Run records


@dataclass
class RunRow:
    evals: float
    passes: float
    objective: float
    grad_norm_sq: float
    feasibility_sq: Optional[float]
    wall_ms: int


@dataclass
class RunRecord:
    """Metric trajectory of one run plus counters and a configuration snapshot.

    ``unit`` is the number of counted operations per pass: ``m`` component
    gradients for finite-sum runs, ``m - 1`` block updates for multi-block runs.
    """

    method: str
    unit: int
    seed: Optional[int] = None
    rows: list = field(default_factory=list)
    component_grad_evals: int = 0
    block_updates: int = 0
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    stop_reason: str = "completed"
    iterates: list = field(default_factory=list, repr=False)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add(self, evals: int, objective: float, grad_norm_sq: float,
            feasibility_sq: Optional[float] = None) -> RunRow:
        row = RunRow(evals=evals, passes=evals / self.unit, objective=float(objective),
                     grad_norm_sq=float(grad_norm_sq),
                     feasibility_sq=None if feasibility_sq is None else float(feasibility_sq),
                     wall_ms=int(round((time.perf_counter() - self._t0) * 1000)))
        if self.rows and row.passes < self.rows[-1].passes:
            raise ValueError("pass column must be nondecreasing")
        self.rows.append(row)
        return row

    @property
    def passes(self) -> np.ndarray:
        return np.array([r.passes for r in self.rows])

    @property
    def final(self) -> Optional[RunRow]:
        return self.rows[-1] if self.rows else None

    def passes_to_tolerance(self, tol: float) -> Optional[float]:
        """First pass count at which ``grad_norm_sq < tol``, or None."""
        for r in self.rows:
            if r.grad_norm_sq < tol:
                return r.passes
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r.passes), repr(r.objective), repr(r.grad_norm_sq),
                        "" if r.feasibility_sq is None else repr(r.feasibility_sq), r.wall_ms])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def summary(self) -> dict:
        final = self.final
        return {
            "method": self.method,
            "seed": self.seed,
            "stop_reason": self.stop_reason,
            "counters": {
                "component_grad_evals": self.component_grad_evals,
                "block_updates": self.block_updates,
                "passes": final.passes if final else 0.0,
            },
            "final": None if final is None else {
                "pass": final.passes,
                "objective": final.objective,
                "grad_norm_sq": final.grad_norm_sq,
                "feasibility_sq": final.feasibility_sq,
            },
            "config": self.config,
            "metadata": self.metadata,
        }


def read_csv_trajectory(path) -> dict:
    """Load a run CSV into column arrays; empty feasibility cells become NaN."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    cols = {name: [] for name in CSV_COLUMNS}
    for r in rows:
        if len(r) != len(CSV_COLUMNS):
            raise ValueError(f"{path}: malformed row {r}")
        for name, v in zip(CSV_COLUMNS, r):
            cols[name].append(float(v) if v != "" else math.nan)
    return {k: np.array(v) for k, v in cols.items()}


def mean_trajectory(trajectories: Sequence[dict], column: str, grid=None):
    """Average ``column`` across runs on a common pass grid (linear interpolation)."""
    if grid is None:
        end = min(t["pass"][-1] for t in trajectories)
        start = max(t["pass"][0] for t in trajectories)
        grid = np.linspace(start, end, 200) if end > start else np.array([start])
    vals = [np.interp(grid, t["pass"], t[column]) for t in trajectories]
    return np.asarray(grid), np.mean(vals, axis=0)
