"""Randomized accelerated proximal dual method for multi-block problems.

The constraint ``sum_i A_i x_i = b`` is first multiplied by ``A_m^{-1}`` so
the last block enters with an identity matrix.  The outer loop is a
proximal-point method on the pair ``(x, x_m)``; each strongly convex
subproblem is solved by a randomized primal-dual inner method (RaDual) that
updates one primal block per iteration.

RaDual only touches ``x_tilde`` through ``A x_tilde``, so the state keeps
``A x^{t-1}`` and ``A (x^{t-1} - x^{t-2})`` up to date incrementally.  The
dual point is never formed from a conjugate: ``y = -grad psi_m(-g)`` where
``g`` is a running average of ``A x_tilde - b``, and the last block's
output is ``x_m = -g``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .metrics import RunRecord, multiblock_kkt
from .problems import MultiBlockProblem, ReformulatedProblem, as_point, reformulate, spectral_norm
from .rapgrad import InvariantError, ValidationReport, _eq, _le, _report
from .rng import make_rng, uniform_indices

DUAL_CONSTANTS = ("theorem", "lemma")
OUTPUT_RULES = ("uniform", "best")
RESYNC_EVERY = 1000


@dataclass(frozen=True)
class RaDualSchedule:
    m: int
    L: float
    mu: float
    abar: float
    alpha: float
    alpha_t: float
    tau: float
    eta: float
    s: int
    m_hat: float
    c: float
    L_hat: float
    mu_bar: float
    inner_constant: str = "theorem"

    def gamma(self, t: int) -> float:
        """Analysis weight ``alpha^{-t}``."""
        return self.alpha ** (-t)


def dual_constant_value(L: float, mu: float, kind: str = "theorem") -> float:
    """``theorem``: ``(2 + L/mu) max(2, L^2/mu^2)``; ``lemma``: ``4 + 2L/mu``."""
    ratio = L / mu
    if kind == "theorem":
        return (2.0 + ratio) * max(2.0, ratio * ratio)
    if kind == "lemma":
        return 4.0 + 2.0 * ratio
    raise ValueError(f"unknown inner constant {kind!r}; choose from {DUAL_CONSTANTS}")


def compute_radual_schedule(m: int, L: float, mu: float, abar: float,
                            inner_constant: str = "theorem") -> RaDualSchedule:
    """Constant step parameters and inner iteration count for RaDual.

    ``alpha``, ``1 - alpha`` and ``alpha - (m-2)/(m-1)`` are formed without
    subtracting nearly equal numbers, which keeps them accurate when ``m`` is
    large or ``c`` is small.
    """
    if m < 2:
        raise ValueError("the dual method needs m >= 2 (at least one block besides the last)")
    if not (mu > 0 and mu <= L):
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    if not abar > 0:
        raise ValueError(f"the block norm bound must be positive, got {abar}")
    L_hat = L + 2.0 * mu
    mu_bar = 1.0 / L_hat
    c = (2.0 * mu + L) * abar * abar / mu
    d = math.sqrt(1.0 + 8.0 * c)
    d_minus = 8.0 * c / (d + 1.0)  # d - 1 without cancellation for small c
    one_minus = 2.0 / ((m - 1) * (d + 1.0))
    alpha = ((m - 1) * d_minus + 2.0 * (m - 2)) / ((m - 1) * (d + 1.0))
    excess = d_minus / ((m - 1) * (d + 1.0))  # alpha - (m-2)/(m-1)
    tau = alpha / one_minus
    eta = excess * mu / one_minus
    m_hat = dual_constant_value(L, mu, inner_constant)
    s = max(1, math.ceil(-math.log(m_hat) / math.log(alpha)))
    return RaDualSchedule(m=m, L=float(L), mu=float(mu), abar=float(abar), alpha=alpha,
                          alpha_t=(m - 1) * alpha, tau=tau, eta=eta, s=s, m_hat=m_hat, c=c,
                          L_hat=L_hat, mu_bar=mu_bar, inner_constant=inner_constant)


def validate_radual_schedule(sch: RaDualSchedule, m: int, mu: float) -> ValidationReport:
    """Check the five step-parameter conditions of the dual inner-solver analysis.

    Parameters are constant in ``t``, so each condition is checked once with
    ``gamma_t = alpha^{-1}`` and ``gamma_{t+1} = alpha^{-2}``.
    """
    a, tau, eta = sch.alpha, sch.tau, sch.eta
    g1, g2 = sch.gamma(1), sch.gamma(2)
    checks = {
        "css1": _eq(sch.alpha_t, (m - 1) * a),
        "css2": _eq(g2 * a, g1),
        "css3": _le(g2 * ((m - 1) * eta + (m - 2) * mu), (m - 1) * g1 * (eta + mu)),
        "css4": _le(g2 * tau, g1 * (tau + 1.0)),
        "css5": _le(2.0 * (m - 1) * a * sch.abar ** 2, sch.mu_bar * eta * tau),
        "range": {"lhs": a, "rhs": 1.0,
                  "ok": bool(0 < a < 1 and tau > 0 and eta > 0 and sch.s >= 1)},
    }
    return _report(checks)


# ---------------------------------------------------------------------------
# Inner solver


@dataclass
class RaDualState:
    """Iterates of the inner solver; primal blocks are stacked into flat vectors.

    ``ax`` is ``A x^{t-1}`` and ``dax`` is ``A (x^{t-1} - x^{t-2})``.  ``y``
    stays None until the first step produces it.
    """

    x_prev: np.ndarray
    x_cur: np.ndarray
    ax: np.ndarray
    dax: np.ndarray
    g: np.ndarray
    center: np.ndarray
    center_m: np.ndarray
    y: Optional[np.ndarray] = None
    block_updates: int = 0
    steps: int = 0
    last_block: Optional[int] = None

    @classmethod
    def start(cls, rp: ReformulatedProblem, x0, xm0) -> "RaDualState":
        x0 = np.array(x0, dtype=np.float64)
        xm0 = np.array(xm0, dtype=np.float64)
        return cls(x_prev=x0.copy(), x_cur=x0.copy(), ax=rp.A_full @ x0, dax=np.zeros(rp.n),
                   g=-xm0, center=x0, center_m=xm0.copy())

    @property
    def xm(self) -> np.ndarray:
        """The last block's output ``-g``."""
        return -self.g


def psi_m_grad(rp: ReformulatedProblem, state: RaDualState, x: np.ndarray) -> np.ndarray:
    """Gradient of ``psi_m = f_m + mu ||. - center_m||^2``."""
    return rp.last_oracle.grad(x) + 2.0 * rp.mu * (x - state.center_m)


def _dual_update(state: RaDualState, sch: RaDualSchedule, rp: ReformulatedProblem, alpha_t: float):
    ax_tilde = state.ax + alpha_t * state.dax
    state.g = (sch.tau * state.g + ax_tilde - rp.b) / (1.0 + sch.tau)
    state.y = -psi_m_grad(rp, state, -state.g)


def _block_prox(rp: ReformulatedProblem, i: int, lin, quad: float, state: RaDualState,
                sl: slice, eta: float) -> np.ndarray:
    # psi_i + eta/2 ||x - x_i||^2 = f_i + (2mu + eta)/2 ||x - c||^2 + const
    two_mu = 2.0 * rp.mu
    center = (two_mu * state.center[sl] + eta * state.x_cur[sl]) / quad
    return rp.blocks[i].solve_prox(lin, quad, center)


def radual_step(state: RaDualState, sch: RaDualSchedule, rp: ReformulatedProblem,
                rng: Optional[np.random.Generator] = None,
                index: Optional[int] = None) -> RaDualState:
    """One RaDual iteration updating a single random block (in place)."""
    nb = len(rp.blocks)
    i = int(rng.integers(nb)) if index is None else int(index)
    _dual_update(state, sch, rp, sch.alpha_t)
    offs = rp.problem.offsets
    sl = slice(offs[i], offs[i + 1])
    quad = 2.0 * rp.mu + sch.eta
    lin = rp.A_blocks[i].T @ state.y
    x_new = _block_prox(rp, i, lin, quad, state, sl, sch.eta)
    # x_prev must equal x^{t-1} after the step; only two blocks can differ
    j = state.last_block
    if j is not None and j != i:
        sj = slice(offs[j], offs[j + 1])
        state.x_prev[sj] = state.x_cur[sj]
    delta = x_new - state.x_cur[sl]
    state.x_prev[sl] = state.x_cur[sl]
    state.x_cur[sl] = x_new
    state.dax = rp.A_blocks[i] @ delta
    state.ax = state.ax + state.dax
    state.last_block = i
    state.block_updates += 1
    state.steps += 1
    return state


def radual_batch_step(state: RaDualState, sch: RaDualSchedule, rp: ReformulatedProblem) -> RaDualState:
    """One batch iteration: every block takes its proximal step."""
    _dual_update(state, sch, rp, sch.alpha_t)
    quad = 2.0 * rp.mu + sch.eta
    lin = rp.A_full.T @ state.y
    flat = rp.problem.flat_oracle
    if flat is not None and all(b.feasible_set.is_whole_space and b.prox is None for b in rp.blocks):
        center = (2.0 * rp.mu * state.center + sch.eta * state.x_cur) / quad
        x_new = flat.prox(lin, quad, center)
    else:
        offs = rp.problem.offsets
        x_new = np.empty_like(state.x_cur)
        for i in range(len(rp.blocks)):
            sl = slice(offs[i], offs[i + 1])
            x_new[sl] = _block_prox(rp, i, lin[sl], quad, state, sl, sch.eta)
    state.dax = rp.A_full @ (x_new - state.x_cur)
    state.ax = state.ax + state.dax
    state.x_prev = state.x_cur
    state.x_cur = x_new
    state.last_block = None
    state.block_updates += len(rp.blocks)
    state.steps += 1
    return state


def radual_solve(state: RaDualState, sch: RaDualSchedule, rp: ReformulatedProblem,
                 rng: np.random.Generator, s: Optional[int] = None, batch: bool = False,
                 monitor=None, monitor_every: int = 0, check: bool = True) -> RaDualState:
    """Run ``s`` RaDual steps; the last block's output is ``state.xm = -g``.

    Indices are drawn up front in both modes so that the random stream does
    not depend on the mode.  ``monitor(state)`` runs every ``monitor_every``
    steps and may return True to stop early.
    """
    s = sch.s if s is None else s
    nb = len(rp.blocks)
    indices = uniform_indices(rng, nb, s)
    for t in range(s):
        if batch:
            radual_batch_step(state, sch, rp)
        else:
            radual_step(state, sch, rp, index=indices[t])
        if check and (t + 1) % RESYNC_EVERY == 0:
            _resync(state, rp)
        if monitor_every and (t + 1) % monitor_every == 0 and monitor(state):
            break
    if check:
        check_last_block(state, rp)
    return state


def _resync(state: RaDualState, rp: ReformulatedProblem):
    fresh = rp.A_full @ state.x_cur
    err = np.linalg.norm(state.ax - fresh)
    if err > 1e-9 * max(1.0, np.linalg.norm(fresh)):
        raise InvariantError(f"incremental A x drifted by {err:.3e}")
    state.ax = fresh


def check_last_block(state: RaDualState, rp: ReformulatedProblem, tol: float = 1e-9) -> float:
    """Stationarity of ``x_m = -g`` for ``min psi_m(x) + <x, y>``; raises past ``tol``."""
    if state.y is None:
        return 0.0
    xm = state.xm
    res = float(np.linalg.norm(psi_m_grad(rp, state, xm) + state.y))
    if res > tol * (1.0 + float(np.linalg.norm(state.y))):
        raise InvariantError(f"last-block stationarity residual {res:.3e}")
    return res


# ---------------------------------------------------------------------------
# Outer loop


@dataclass
class RapDualConfig:
    k: int = 10
    seed: int = 0
    s_override: Optional[int] = None
    s_factor: float = 1.0
    output_rule: str = "uniform"
    inner_constant: str = "theorem"
    batch: bool = False
    x0: Optional[np.ndarray] = field(default=None, repr=False)
    record_every: float = 1.0
    max_passes: Optional[float] = None
    stop_tol: Optional[float] = None
    check_invariants: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.s_override is not None and self.s_override < 0:
            raise ValueError("s_override must be nonnegative")
        if not self.s_factor > 0:
            raise ValueError("s_factor must be positive")
        if self.output_rule not in OUTPUT_RULES:
            raise ValueError(f"output_rule must be one of {OUTPUT_RULES}")

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("x0")
        return d


def dual_schedule_for(rp: ReformulatedProblem, batch: bool = False,
                      inner_constant: str = "theorem") -> RaDualSchedule:
    """Randomized schedule uses ``max_i ||A_i||``; batch treats the stacked
    matrix as one block, with ``||A||`` in place of that bound."""
    if batch:
        return compute_radual_schedule(2, rp.L, rp.mu, spectral_norm(rp.A_full), inner_constant)
    return compute_radual_schedule(rp.m, rp.L, rp.mu, rp.abar, inner_constant)


def _inner_iterations(sch: RaDualSchedule, cfg) -> int:
    if cfg.s_override is not None:
        return int(cfg.s_override)
    return max(1, math.floor(sch.s * cfg.s_factor))


def rapdual_run(problem: MultiBlockProblem, cfg: RapDualConfig = RapDualConfig(),
                rp: Optional[ReformulatedProblem] = None):
    """Run the proximal-point outer loop; returns ``(xs, xm, record)``.

    ``xs`` is a list of block vectors.  Passes are block updates divided by
    ``m - 1``; each recorded row holds the objective, the squared
    feasibility residual and the block KKT residual (in ``grad_norm_sq``).
    """
    rp = reformulate(problem) if rp is None else rp
    nb = len(rp.blocks)
    sch = dual_schedule_for(rp, cfg.batch, cfg.inner_constant)
    s = _inner_iterations(sch, cfg)
    # batch iterations each cost nb block updates
    cost = nb if cfg.batch else 1
    rng = make_rng(cfg.seed)

    record = RunRecord(method="batch-rapdual" if cfg.batch else "rapdual", unit=nb,
                       seed=cfg.seed, config=cfg.snapshot())
    record.metadata.update({
        "schedule": asdict(sch), "s_used": s,
        "x0_rule": "zero blocks projected onto X_i" if cfg.x0 is None else "given",
        "output_rule": cfg.output_rule,
        "output_rule_note": None if cfg.output_rule == "uniform"
        else "best-by-feasibility output is a practical choice, not the uniform random index",
        "m": rp.m, "n": rp.n, "L": rp.L, "mu": rp.mu, "abar": rp.abar, "a_norm2": rp.a_norm2,
        "multiplier_estimate": "lambda = -grad f_m(x_m)",
    })

    if cfg.x0 is None:
        x_bar = np.zeros(problem.total_dim)
    else:
        x_bar = as_point(cfg.x0, problem.total_dim, "x0").copy()
    for blk, sl in zip(rp.blocks, problem.split(x_bar)):
        sl[:] = blk.feasible_set.project(sl)
    xm_bar = rp.b - rp.A_full @ x_bar
    record.metadata["initial_feasibility_sq"] = _feasibility_sq(rp, x_bar, xm_bar)
    iterates = [(x_bar.copy(), xm_bar.copy())]
    stop = {"reason": None, "x": None}

    def measure(x, xm, updates):
        feas = _feasibility_sq(rp, x, xm)
        kkt = _kkt_sq(rp, x, xm)
        obj = problem.blocks_value(x) + problem.last_oracle.value(xm)
        record.add(updates, obj, kkt, feas)
        if cfg.stop_tol is not None and kkt < cfg.stop_tol:
            stop["reason"], stop["x"] = "tolerance", (x.copy(), xm.copy())
        elif cfg.max_passes is not None and updates / nb >= cfg.max_passes:
            stop["reason"], stop["x"] = "max_passes", (x.copy(), xm.copy())
        return stop["reason"] is not None

    updates = 0
    measure(x_bar, xm_bar, updates)
    monitor_every = max(1, int(round(cfg.record_every * nb / cost)))
    residuals = []

    for ell in range(1, cfg.k + 1):
        if stop["reason"]:
            break
        state = RaDualState.start(rp, x_bar, xm_bar)
        base = updates

        def monitor(st, base=base):
            return measure(st.x_cur, st.xm, base + st.block_updates)

        radual_solve(state, sch, rp, rng, s=s, batch=cfg.batch, monitor=monitor,
                     monitor_every=monitor_every, check=cfg.check_invariants)
        if cfg.check_invariants:
            residuals.append(check_last_block(state, rp))
        updates += state.block_updates
        x_bar, xm_bar = state.x_cur.copy(), state.xm.copy()
        iterates.append((x_bar.copy(), xm_bar.copy()))
        if not stop["reason"] and record.rows[-1].evals != updates:
            measure(x_bar, xm_bar, updates)

    record.block_updates = updates
    record.metadata["outer_iterations"] = len(iterates) - 1
    record.metadata["max_last_block_residual"] = max(residuals) if residuals else 0.0
    record.iterates = iterates
    if stop["reason"]:
        record.stop_reason = stop["reason"]
        record.metadata["output_index"] = None
        x, xm = stop["x"]
        return problem.split(x), xm, record
    k = len(iterates) - 1
    if cfg.output_rule == "uniform":
        idx = int(rng.integers(1, k + 1))
    else:
        idx = 1 + int(np.argmin([_feasibility_sq(rp, x, xm) for x, xm in iterates[1:]]))
    record.metadata["output_index"] = idx
    x, xm = iterates[idx]
    return [v.copy() for v in problem.split(x)], xm.copy(), record


def _feasibility_sq(rp: ReformulatedProblem, x, xm) -> float:
    r = rp.A_full @ x + xm - rp.b
    return float(r @ r)


def _kkt_sq(rp: ReformulatedProblem, x, xm) -> float:
    """Squared block KKT residual with ``lambda = -grad f_m(x_m)``."""
    lam = -rp.last_oracle.grad(xm)
    r = rp.problem.blocks_grad(x) + rp.A_full.T @ lam
    if all(b.feasible_set.is_whole_space for b in rp.blocks):
        return float(r @ r)
    return multiblock_kkt(rp, rp.problem.split(x), xm).kkt_block_sq
