"""Randomized accelerated proximal gradient for nonconvex finite sums.

The outer loop is a proximal-point method: at step ``l`` it approximately
solves the strongly convex subproblem

    min_X  f(x) + (3 mu / 2) ||x - xbar_{l-1}||^2

with ``s`` iterations of a randomized primal-dual gradient inner solver
(RaGrad).  Each inner iteration evaluates a single component gradient.  The
inner solver's gradient table ``y_i`` is carried across subproblems, shifted
by ``2 mu (xbar_{l-1} - xbar_l)``, so that a full gradient is only computed
once, at initialisation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .metrics import RunRecord, ncone_distance_sq
from .problems import BatchProblem, FeasibleSet, FiniteSumProblem, as_point
from .rng import make_rng, uniform_indices

INNER_CONSTANTS = ("theorem", "lemma", "experiments")
OUTPUT_RULES = ("uniform", "best")
CONDITION_SLACK = 1.0 + 1e-12


class InvariantError(RuntimeError):
    """An algebraic identity the algorithm maintains was violated (a bug)."""


@dataclass(frozen=True)
class RaGradSchedule:
    m: int
    L: float
    mu: float
    alpha: float
    tau: float
    eta: float
    s: int
    m_tilde: float
    c: float
    L_hat: float
    inner_constant: str = "theorem"

    def gamma(self, t: int) -> float:
        """Analysis weight ``alpha^{-t}``."""
        return self.alpha ** (-t)


def inner_constant_value(L: float, mu: float, kind: str = "theorem") -> float:
    """Constant whose log sets the inner iteration count.

    ``theorem``: ``6 (5 + 2L/mu) max(6/5, L^2/mu^2)``; ``lemma``: ``7M/6`` and
    ``experiments``: ``6M/5`` with ``M = 6 (5 + 2L/mu)``.
    """
    ratio = L / mu
    M = 6.0 * (5.0 + 2.0 * ratio)
    if kind == "theorem":
        return M * max(6.0 / 5.0, ratio * ratio)
    if kind == "lemma":
        return 7.0 * M / 6.0
    if kind == "experiments":
        return 6.0 * M / 5.0
    raise ValueError(f"unknown inner constant {kind!r}; choose from {INNER_CONSTANTS}")


def compute_ragrad_schedule(m: int, L: float, mu: float,
                            inner_constant: str = "theorem") -> RaGradSchedule:
    """Constant step parameters and inner iteration count for RaGrad."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if not (mu > 0 and mu <= L):
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    c = 2.0 + L / mu
    alpha = 1.0 - 2.0 / (m * (math.sqrt(1.0 + 16.0 * c / m) + 1.0))
    tau = 1.0 / (m * (1.0 - alpha)) - 1.0
    eta = alpha / (1.0 - alpha)
    m_tilde = inner_constant_value(L, mu, inner_constant)
    s = max(1, math.ceil(-math.log(m_tilde) / math.log(alpha)))
    return RaGradSchedule(m=m, L=float(L), mu=float(mu), alpha=alpha, tau=tau, eta=eta, s=s,
                          m_tilde=m_tilde, c=c, L_hat=L + 2.0 * mu,
                          inner_constant=inner_constant)


@dataclass
class ValidationReport:
    passed: bool
    violations: list
    checks: dict

    def lines(self) -> list:
        return [f"{name}: {'pass' if c['ok'] else 'FAIL'} (lhs={c['lhs']:.6g}, rhs={c['rhs']:.6g})"
                for name, c in self.checks.items()]


def _report(checks: dict) -> ValidationReport:
    violations = [k for k, c in checks.items() if not c["ok"]]
    return ValidationReport(passed=not violations, violations=violations, checks=checks)


def _le(lhs: float, rhs: float) -> dict:
    return {"lhs": lhs, "rhs": rhs, "ok": bool(lhs <= rhs * CONDITION_SLACK)}


def _eq(lhs: float, rhs: float) -> dict:
    return {"lhs": lhs, "rhs": rhs, "ok": bool(abs(lhs - rhs) <= (CONDITION_SLACK - 1.0) * abs(rhs))}


def validate_ragrad_schedule(sch: RaGradSchedule, m: int, mu: float) -> ValidationReport:
    """Check the six step-parameter conditions of the inner-solver analysis.

    Parameters are constant in ``t`` so each condition is checked once with
    ``gamma_t = alpha^{-1}`` and ``gamma_{t+1} = alpha^{-2}``.
    """
    a, tau, eta, Lh = sch.alpha, sch.tau, sch.eta, sch.L_hat
    g1, g2 = sch.gamma(1), sch.gamma(2)
    tail = (m - 1) ** 2 * Lh / (m * m * tau) if tau > 0 else math.inf
    checks = {
        "ss1": _eq(a * g2, g1),
        "ss2": _le(g2 * (m * (1 + tau) - 1), m * g1 * (1 + tau)),
        "ss3": _le(g2 * eta, g1 * (1 + eta)),
        "ss4": _le(tail, eta * mu / 4),
        "ss5": _le(a * Lh / tau + tail if tau > 0 else math.inf, eta * mu / 2),
        "ss6": _le(Lh / (m * (1 + tau)), eta * mu / 4),
        "range": {"lhs": a, "rhs": 1.0,
                  "ok": bool(0 < a < 1 and tau > 0 and eta > 0 and sch.s >= 1)},
    }
    return _report(checks)


# ---------------------------------------------------------------------------
# Inner solver


@dataclass
class RaGradState:
    """Iterates of the inner solver; ``x_under`` and ``y`` are ``m x n`` arrays."""

    x_prev: np.ndarray
    x_cur: np.ndarray
    x_under: np.ndarray
    y: np.ndarray
    y_sum: np.ndarray
    center: np.ndarray
    grad_count: int = 0

    @classmethod
    def start(cls, center, x_under, y) -> "RaGradState":
        center = np.array(center, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        return cls(x_prev=center.copy(), x_cur=center.copy(),
                   x_under=np.array(x_under, dtype=np.float64), y=y,
                   y_sum=y.sum(axis=0), center=center)


def ragrad_step(state: RaGradState, sch: RaGradSchedule,
                psi_grad: Callable[[int, np.ndarray], np.ndarray], fs: FeasibleSet,
                rng: Optional[np.random.Generator] = None, index: Optional[int] = None) -> RaGradState:
    """One RaGrad iteration (updates ``state`` in place and returns it).

    Only the sampled component's ``y`` changes, so the average of the
    extrapolated gradients is ``y_sum/m + (y_new - y_old)``.
    """
    m = state.y.shape[0]
    i = int(rng.integers(m)) if index is None else int(index)
    x_cur = state.x_cur
    x_tilde = sch.alpha * (x_cur - state.x_prev) + x_cur
    xu = (x_tilde + sch.tau * state.x_under[i]) / (1.0 + sch.tau)
    state.x_under[i] = xu
    y_new = psi_grad(i, xu)
    state.grad_count += 1
    diff = y_new - state.y[i]
    g_bar = state.y_sum / m + diff
    state.y_sum += diff
    state.y[i] = y_new
    x_new = fs.project((state.center + sch.eta * x_cur - g_bar / sch.mu) / (1.0 + sch.eta))
    state.x_prev = x_cur
    state.x_cur = x_new
    return state


def ragrad_solve(state: RaGradState, sch: RaGradSchedule, problem: FiniteSumProblem,
                 rng: np.random.Generator, s: Optional[int] = None,
                 monitor: Optional[Callable[[int, RaGradState], bool]] = None,
                 monitor_every: int = 0) -> RaGradState:
    """Run ``s`` RaGrad steps on ``f + (3 mu/2)||. - center||^2``.

    The subproblem is split as ``(1/m) sum psi_i + phi`` with
    ``psi_i = f_i + mu ||. - center||^2`` and ``phi = (mu/2)||. - center||^2``.
    ``monitor(t, state)`` is called every ``monitor_every`` steps; returning
    True stops the loop early.
    """
    s = sch.s if s is None else s
    center = state.center
    two_mu = 2.0 * sch.mu
    fs = problem.feasible_set
    comp_grad = problem.component_grad

    def psi_grad(i, x):
        return comp_grad(i, x) + two_mu * (x - center)

    indices = uniform_indices(rng, state.y.shape[0], s)
    for t in range(s):
        ragrad_step(state, sch, psi_grad, fs, index=indices[t])
        if monitor_every and (t + 1) % monitor_every == 0 and monitor(t + 1, state):
            break
    return state


# ---------------------------------------------------------------------------
# Outer loop


@dataclass
class RapGradConfig:
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


def inner_iterations(sch: RaGradSchedule, cfg) -> int:
    """Theoretical ``s`` scaled by ``s_factor`` (floored at 1) unless overridden."""
    if cfg.s_override is not None:
        return int(cfg.s_override)
    return max(1, math.floor(sch.s * cfg.s_factor))


def rapgrad_run(problem: FiniteSumProblem, cfg: RapGradConfig = RapGradConfig()):
    """Run the proximal-point outer loop; returns ``(x_out, record)``.

    With ``cfg.batch`` the finite sum is treated as one component, so each
    inner iteration costs a full gradient (``m`` evaluations).
    """
    work = BatchProblem(problem) if cfg.batch else problem
    evals_per_grad = problem.m if cfg.batch else 1
    unit = problem.m
    mu = problem.mu
    sch = compute_ragrad_schedule(work.m, problem.L, mu, cfg.inner_constant)
    s = inner_iterations(sch, cfg)
    rng = make_rng(cfg.seed)
    fs = problem.feasible_set
    n = problem.n

    record = RunRecord(method="batch-rapgrad" if cfg.batch else "rapgrad", unit=unit,
                       seed=cfg.seed, config=cfg.snapshot())
    record.metadata.update({
        "schedule": asdict(sch), "s_used": s, "x0_rule": "zero vector" if cfg.x0 is None else "given",
        "output_rule": cfg.output_rule,
        "output_rule_note": None if cfg.output_rule == "uniform"
        else "best-by-metric output is a practical choice, not the uniform random index",
        "m": problem.m, "n": n, "L": problem.L, "mu": mu,
    })

    x_bar = fs.project(np.zeros(n) if cfg.x0 is None else as_point(cfg.x0, n, "x0").copy())
    x_under = np.tile(x_bar, (work.m, 1))
    y = np.empty((work.m, n))
    for i in range(work.m):
        y[i] = work.component_grad(i, x_bar)
    evals = work.m * evals_per_grad
    iterates = [x_bar.copy()]
    invariant_errors = []

    stop = {"reason": None, "x": None}

    def measure(x, evals_now):
        g = problem.gradient(x)
        gn = ncone_distance_sq(g, fs, x)
        record.add(evals_now, problem.value(x), gn)
        if cfg.stop_tol is not None and gn < cfg.stop_tol:
            stop["reason"], stop["x"] = "tolerance", x.copy()
        elif cfg.max_passes is not None and evals_now / unit >= cfg.max_passes:
            stop["reason"], stop["x"] = "max_passes", x.copy()
        return stop["reason"] is not None

    measure(x_bar, evals)
    monitor_every = max(1, int(round(cfg.record_every * unit / evals_per_grad)))

    for ell in range(1, cfg.k + 1):
        if stop["reason"]:
            break
        state = RaGradState.start(x_bar, x_under, y)
        base_evals = evals

        def monitor(t, st, base=base_evals):
            return measure(st.x_cur, base + t * evals_per_grad)

        ragrad_solve(state, sch, work, rng, s=s, monitor=monitor, monitor_every=monitor_every)
        evals += state.grad_count * evals_per_grad
        new_bar = state.x_cur
        # the carried gradients become gradients of the next subproblem's psi_i
        y = state.y + 2.0 * mu * (x_bar - new_bar)
        x_under = state.x_under
        x_bar = new_bar
        iterates.append(x_bar.copy())
        if cfg.check_invariants:
            invariant_errors.append(_check_y_invariant(work, x_under, y, x_bar, mu))
        if not stop["reason"] and (not record.rows or record.rows[-1].evals != evals):
            measure(x_bar, evals)

    record.component_grad_evals = evals
    record.metadata["outer_iterations"] = len(iterates) - 1
    record.metadata["max_y_invariant_error"] = max(invariant_errors, default=0.0)
    record.iterates = iterates
    if stop["reason"]:
        record.stop_reason = stop["reason"]
        record.metadata["output_index"] = None
        return stop["x"], record
    x_out, idx = _select_output(problem, iterates, cfg.output_rule, rng)
    record.metadata["output_index"] = idx
    return x_out, record


def _check_y_invariant(work: FiniteSumProblem, x_under, y, x_bar, mu, tol: float = 1e-9) -> float:
    """Largest relative gap between each carried gradient and its recomputed value."""
    worst = 0.0
    for i in range(work.m):
        expect = work.component_grad(i, x_under[i]) + 2.0 * mu * (x_under[i] - x_bar)
        err = float(np.linalg.norm(y[i] - expect)) / (1.0 + float(np.linalg.norm(expect)))
        if err > tol:
            raise InvariantError(f"carried gradient {i} drifted by {err:.3e}")
        worst = max(worst, err)
    return worst


def _select_output(problem, iterates, rule, rng):
    k = len(iterates) - 1
    if rule == "uniform":
        idx = int(rng.integers(1, k + 1))
    else:
        fs = problem.feasible_set
        scores = [ncone_distance_sq(problem.gradient(x), fs, x) for x in iterates[1:]]
        idx = int(np.argmin(scores)) + 1
    return iterates[idx].copy(), idx
