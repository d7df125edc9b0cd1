"""Comparison methods: nonconvex SVRG, nonconvex accelerated gradient, a
cyclic proximal ADMM for multi-block problems, and the inner-iteration
tuning protocol for RapGrad.

Finite-sum methods count component gradients (``m`` per pass); the ADMM
counts block updates on the same axis as the dual method (``m - 1`` per
pass).  Metric evaluations made only for recording are not charged.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import RunRecord, SolverDivergence, ncone_distance_sq
from .problems import FiniteSumProblem, MultiBlockProblem, as_point, reformulate
from .rapgrad import RapGradConfig, rapgrad_run
from .rng import make_rng, uniform_indices

METHODS = ("svrg", "ag", "admm", "batch-rapgrad", "batch-rapdual")


@dataclass
class BaselineConfig:
    method: str = "svrg"
    step_params: dict = field(default_factory=dict)
    max_passes: float = 3e4
    stop_tol: float = 1e-10
    seed: int = 0
    record_every: float = 1.0
    x0: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.max_passes > 0:
            raise ValueError("max_passes must be positive")
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be nonnegative")

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("x0")
        return d


def _start(p: FiniteSumProblem, x0) -> np.ndarray:
    x = np.zeros(p.n) if x0 is None else as_point(x0, p.n, "x0").copy()
    return p.feasible_set.project(x)


class _Tracker:
    """Records metrics and decides when a finite-sum run stops."""

    def __init__(self, p: FiniteSumProblem, record: RunRecord, cfg: BaselineConfig):
        self.p = p
        self.record = record
        self.cfg = cfg
        self.reason = None

    def __call__(self, x, evals) -> bool:
        p = self.p
        g = p.gradient(x)
        gn = ncone_distance_sq(g, p.feasible_set, x)
        self.record.add(evals, p.value(x), gn)
        if gn < self.cfg.stop_tol:
            self.reason = "tolerance"
        elif evals / p.m >= self.cfg.max_passes:
            self.reason = "max_passes"
        return self.reason is not None


def svrg_gradient(p: FiniteSumProblem, i: int, x, anchor, full_grad) -> np.ndarray:
    """Variance-reduced estimate ``grad f_i(x) - grad f_i(anchor) + full_grad``."""
    return p.component_grad(i, x) - p.component_grad(i, anchor) + full_grad


def run_svrg(p: FiniteSumProblem, cfg: BaselineConfig = BaselineConfig()):
    """Epoch-based nonconvex SVRG; returns ``(x, record)``.

    Step parameters: ``step`` (default ``1/(3 L m^{2/3})``) and
    ``epoch_length`` (default ``m``).  Each epoch costs ``m`` gradients at
    the anchor plus two per inner step.
    """
    m = p.m
    step = float(cfg.step_params.get("step", 1.0 / (3.0 * p.L * m ** (2.0 / 3.0))))
    epoch = int(cfg.step_params.get("epoch_length", m))
    if step <= 0 or epoch < 0:
        raise ValueError("SVRG needs a positive step and a nonnegative epoch length")
    rng = make_rng(cfg.seed)
    fs = p.feasible_set
    record = RunRecord(method="svrg", unit=m, seed=cfg.seed, config=cfg.snapshot())
    record.metadata.update({"step": step, "epoch_length": epoch,
                            "step_rule": "1/(3 L m^(2/3)), epoch length m (defaults)",
                            "output": "last iterate"})
    track = _Tracker(p, record, cfg)
    x = _start(p, cfg.x0)
    evals = 0
    every = max(1, int(round(cfg.record_every * m / 2)))
    track(x, evals)
    while track.reason is None:
        anchor = x.copy()
        full = p.gradient(anchor)
        evals += m
        if epoch == 0:
            if track(x, evals):
                break
            continue
        for t, i in enumerate(uniform_indices(rng, m, epoch)):
            v = p.component_grad(i, x) - p.component_grad(i, anchor) + full
            x = fs.project(x - step * v)
            evals += 2
            if (t + 1) % every == 0 and track(x, evals):
                break
        if track.reason is None and record.rows[-1].evals != evals:
            track(x, evals)
    record.component_grad_evals = evals
    record.stop_reason = track.reason
    return x, record


def run_ag(p: FiniteSumProblem, cfg: BaselineConfig = BaselineConfig()):
    """Accelerated gradient for nonconvex smooth problems; returns ``(x_ag, record)``.

    Iteration ``k`` uses ``alpha_k = 2/(k+1)``, ``beta = 1/(2L)`` and
    ``lambda_k = (1 + alpha_k/4) beta`` (``step_params["lambda_rule"] =
    "nonconvex"``) or ``k beta / 2`` (``"convex"``).  With
    ``step_params["momentum"] = False`` every ``alpha_k`` is 1, ``lambda_k`` is
    ``beta`` and the method is projected gradient descent with step ``beta``.  One full gradient
    (one pass) per iteration.
    """
    beta = float(cfg.step_params.get("beta", 1.0 / (2.0 * p.L)))
    rule = cfg.step_params.get("lambda_rule", "nonconvex")
    momentum = bool(cfg.step_params.get("momentum", True))
    if rule not in ("nonconvex", "convex"):
        raise ValueError("lambda_rule must be 'nonconvex' or 'convex'")
    fs = p.feasible_set
    record = RunRecord(method="ag", unit=p.m, seed=cfg.seed, config=cfg.snapshot())
    record.metadata.update({"beta": beta, "lambda_rule": rule, "momentum": momentum,
                            "alpha_rule": "2/(k+1)" if momentum else "1"})
    track = _Tracker(p, record, cfg)
    x = _start(p, cfg.x0)
    x_ag = x.copy()
    evals = 0
    track(x_ag, evals)
    k = 0
    while track.reason is None:
        k += 1
        a = 2.0 / (k + 1.0) if momentum else 1.0
        if not momentum:
            lam = beta
        elif rule == "nonconvex":
            lam = (1.0 + a / 4.0) * beta
        else:
            lam = k * beta / 2.0
        x_md = (1.0 - a) * x_ag + a * x
        g = p.gradient(x_md)
        evals += p.m
        x = fs.project(x - lam * g)
        x_ag = fs.project(x_md - beta * g)
        track(x_ag, evals)
    record.component_grad_evals = evals
    record.stop_reason = track.reason
    return x_ag, record


def run_admm(p: MultiBlockProblem, rho: float, cfg: BaselineConfig = BaselineConfig(method="admm"),
             k: Optional[int] = None):
    """Cyclic proximal ADMM on the reformulated constraint ``A x + x_m = b``.

    A cycle updates blocks ``1..m-1`` in order, each by an exact prox of
    ``f_i`` plus the linearized penalty with weight ``rho ||A_i||^2``; then
    ``x_m`` by a gradient step on ``f_m`` with the exact penalty, then the
    multiplier.  One cycle is ``m`` block updates.  Returns
    ``(xs, xm, record)``; ``grad_norm_sq`` holds the block KKT residual with
    ``lambda = -grad f_m(x_m)``.
    """
    if not rho > 0:
        raise ValueError("ADMM penalty rho must be positive")
    rp = reformulate(p)
    nb = len(rp.blocks)
    record = RunRecord(method="admm", unit=nb, seed=cfg.seed, config=cfg.snapshot())
    record.metadata.update({
        "rho": rho, "scheme": "cyclic linearized-proximal blocks, gradient step on the last block",
        "note": "generic proximal ADMM; not a line-by-line reproduction of any published variant"})
    x = np.zeros(p.total_dim) if cfg.x0 is None else as_point(cfg.x0, p.total_dim, "x0").copy()
    xs = p.split(x)
    for blk, xi in zip(rp.blocks, xs):
        xi[:] = blk.feasible_set.project(xi)
    xm = rp.b - rp.A_full @ x
    lam = -rp.last_oracle.grad(xm)
    norms2 = rp.block_norms ** 2
    updates = 0

    def measure() -> bool:
        r = rp.A_full @ x + xm - rp.b
        feas = float(r @ r)
        if not math.isfinite(feas) or not np.all(np.isfinite(xm)):
            raise SolverDivergence(f"ADMM diverged after {updates} block updates; try a larger rho")
        lam_hat = -rp.last_oracle.grad(xm)
        kkt = 0.0
        for blk, Ai, xi in zip(rp.blocks, rp.A_blocks, xs):
            kkt += ncone_distance_sq(blk.oracle.grad(xi) + Ai.T @ lam_hat, blk.feasible_set, xi)
        record.add(updates, p.blocks_value(x) + p.last_oracle.value(xm), kkt, feas)
        if kkt < cfg.stop_tol and feas < cfg.stop_tol:
            record.stop_reason = "tolerance"
        elif updates / nb >= cfg.max_passes or (k is not None and updates >= k * (nb + 1)):
            record.stop_reason = "max_passes"
        return record.stop_reason in ("tolerance", "max_passes")

    record.stop_reason = "running"
    measure()
    cycles_per_row = max(1, int(round(cfg.record_every * nb / (nb + 1))))
    cycle = 0
    while True:
        r = rp.A_full @ x + xm - rp.b
        for i, (blk, Ai) in enumerate(zip(rp.blocks, rp.A_blocks)):
            xi = xs[i]
            quad = rho * norms2[i] + p.mu
            lin = Ai.T @ (lam + rho * r)
            new = blk.solve_prox(lin, quad, xi)
            r += Ai @ (new - xi)
            xi[:] = new
        gm = rp.last_oracle.grad(xm)
        # r = A x + xm - b, so b - A x = xm - r
        xm = xm - r - (gm + lam) / rho
        lam = lam + rho * (rp.A_full @ x + xm - rp.b)
        updates += nb + 1
        cycle += 1
        if cycle % cycles_per_row == 0 and measure():
            break
    record.block_updates = updates
    return [xi.copy() for xi in xs], xm, record


@dataclass
class TuneResult:
    best_factor: float
    final_grad_norm_sq: dict
    records: dict = field(repr=False, default_factory=dict)


def tune_inner_iterations(p: FiniteSumProblem, factors: Sequence[float] = (1.0, 0.1, 0.01),
                          budget_passes: float = 100.0, seed: int = 0,
                          base: Optional[RapGradConfig] = None) -> TuneResult:
    """Run RapGrad with ``s * factor`` inner steps for ``budget_passes`` each and
    return the factor with the smallest final ``||grad f||^2`` (first on ties)."""
    factors = list(factors)
    if not factors:
        raise ValueError("need at least one factor")
    finals, records = {}, {}
    for f in factors:
        cfg = RapGradConfig(k=10 ** 9, seed=seed, s_factor=f, max_passes=budget_passes,
                            record_every=1.0,
                            inner_constant=base.inner_constant if base else "theorem",
                            check_invariants=False)
        _, rec = rapgrad_run(p, cfg)
        finals[f] = rec.final.grad_norm_sq
        records[f] = rec
    best = min(factors, key=lambda f: (finals[f], factors.index(f)))
    return TuneResult(best_factor=best, final_grad_norm_sq=finals, records=records)
