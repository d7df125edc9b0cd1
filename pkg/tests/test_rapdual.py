import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import quadratic_multiblock
from rapopt.problems import BlockSpec, FeasibleSet, MultiBlockProblem, QuadraticOracle, reformulate
from rapopt.rapdual import (
    RaDualSchedule,
    RaDualState,
    RapDualConfig,
    compute_radual_schedule,
    dual_constant_value,
    psi_m_grad,
    radual_batch_step,
    radual_solve,
    radual_step,
    rapdual_run,
    validate_radual_schedule,
)
from rapopt.rapgrad import InvariantError
from rapopt.rng import make_rng

# reference values computed at 40 digits with mpmath
EX_ALPHA = 0.99468423991370112
EX_TAU = 187.11985186792849
EX_ETA = 19.902205763103165


def test_schedule_example_m3():
    sch = compute_radual_schedule(3, 1.0, 1.0, 1.0)
    assert sch.c == 3.0
    assert sch.alpha == pytest.approx(5 / 6, rel=1e-15)
    assert sch.alpha_t == pytest.approx(5 / 3, rel=1e-15)
    assert sch.tau == pytest.approx(5.0, rel=1e-14)
    assert sch.eta == pytest.approx(2.0, rel=1e-14)
    assert sch.m_hat == 6.0
    assert sch.s == 10
    assert sch.mu_bar == pytest.approx(1 / 3, rel=1e-15)


def test_schedule_example_m10():
    sch = compute_radual_schedule(10, 50.0, 1.0, 2.0)
    assert sch.c == 208.0
    assert sch.alpha == pytest.approx(EX_ALPHA, rel=1e-14)
    assert sch.tau == pytest.approx(EX_TAU, rel=1e-12)
    assert sch.eta == pytest.approx(EX_ETA, rel=1e-12)
    assert sch.m_hat == 130000.0
    assert sch.s == 2210
    assert validate_radual_schedule(sch, 10, 1.0).passed


def test_dual_constant_variants():
    assert dual_constant_value(10.0, 1.0, "theorem") == 12.0 * 100.0
    assert dual_constant_value(10.0, 1.0, "lemma") == 24.0
    with pytest.raises(ValueError):
        dual_constant_value(1.0, 1.0, "experiments")


@pytest.mark.parametrize("args", [(1, 1.0, 1.0, 1.0), (3, 1.0, 0.0, 1.0), (3, 1.0, 2.0, 1.0),
                                  (3, 1.0, 1.0, 0.0), (3, 1.0, 1.0, -1.0)])
def test_schedule_rejects_bad_input(args):
    with pytest.raises(ValueError):
        compute_radual_schedule(*args)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 20000), st.floats(1.0, 1e4), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_any_valid_dual_schedule_passes(m, ratio, mu, abar):
    sch = compute_radual_schedule(m, ratio * mu, mu, abar)
    assert sch.eta > 0
    assert sch.alpha > (m - 2) / (m - 1)
    rep = validate_radual_schedule(sch, m, mu)
    assert rep.passed, rep.violations


def test_tampered_tau_violates_css5():
    sch = compute_radual_schedule(10, 50.0, 1.0, 2.0)
    bad = RaDualSchedule(**{**sch.__dict__, "tau": sch.tau / 4})
    rep = validate_radual_schedule(bad, 10, 1.0)
    assert "css5" in rep.violations


def test_m2_schedule_passes():
    sch = compute_radual_schedule(2, 7.0, 1.0, 0.5)
    assert validate_radual_schedule(sch, 2, 1.0).passed
    assert sch.alpha_t == sch.alpha


def _one_block_problem(kappa_f=3.0, mu=1.0, n=1):
    blk = BlockSpec(QuadraticOracle(kappa_f * np.eye(1)), np.ones((n, 1)))
    return MultiBlockProblem([blk], QuadraticOracle(np.eye(n)), np.eye(n), np.zeros(n), L=5.0, mu=mu)


def _manual(tau=1.0, eta=1.0, alpha=0.5, m=2, mu=1.0):
    return RaDualSchedule(m=m, L=5.0, mu=mu, abar=1.0, alpha=alpha, alpha_t=(m - 1) * alpha,
                          tau=tau, eta=eta, s=1, m_hat=1.0, c=1.0, L_hat=7.0, mu_bar=1 / 7)


def test_g_update_is_convex_combination():
    rp = reformulate(_one_block_problem(n=2))
    rp_b = np.array([-0.5, 1.5])
    rp = reformulate(MultiBlockProblem(rp.problem.blocks, rp.problem.last_oracle, np.eye(2), rp_b,
                                       L=5.0, mu=1.0))
    st_ = RaDualState.start(rp, np.array([1.0]), np.zeros(2))
    st_.g = np.zeros(2)
    v = rp.A_full @ st_.x_cur - rp.b
    radual_step(st_, _manual(tau=1.0), rp, index=0)
    # dax starts at zero so x_tilde = x^{t-1}
    np.testing.assert_array_equal(-st_.xm, v / 2)


def test_quadratic_block_update_matches_brute_force():
    mu, kappa = 1.0, 5.0
    rp = reformulate(_one_block_problem(kappa_f=kappa - 2 * mu, mu=mu))
    eta = 1.7
    x_prev = np.array([0.8])
    st_ = RaDualState.start(rp, np.zeros(1), np.array([0.3]))
    st_.x_cur = x_prev.copy()
    st_.x_prev = x_prev.copy()
    st_.ax = rp.A_full @ x_prev
    radual_step(st_, _manual(eta=eta, mu=mu), rp, index=0)
    y = st_.y
    lin = float(rp.A_blocks[0][:, 0] @ y)
    closed = (eta * x_prev[0] - lin) / (kappa + eta)
    grid = np.linspace(-5, 5, 200001)
    obj = 0.5 * kappa * grid ** 2 + lin * grid + 0.5 * eta * (grid - x_prev[0]) ** 2
    brute = grid[np.argmin(obj)]
    assert st_.x_cur[0] == pytest.approx(closed, abs=1e-12)
    assert abs(st_.x_cur[0] - brute) <= 1e-4


def _rp(seed=0, nb=6, n=4, identity_last=False):
    rng = np.random.default_rng(seed)
    p, xs, xm, lam = quadratic_multiblock(rng, nb, n, L=10.0, mu=1.0, identity_last=identity_last)
    return p, reformulate(p), xs, xm


def test_zero_steps_return_start():
    p, rp, _, _ = _rp()
    x0 = np.arange(p.total_dim, dtype=float)
    xm0 = np.ones(p.n)
    sch = compute_radual_schedule(rp.m, rp.L, rp.mu, rp.abar)
    st_ = RaDualState.start(rp, x0, xm0)
    radual_solve(st_, sch, rp, make_rng(0), s=0)
    np.testing.assert_array_equal(st_.xm, xm0)
    np.testing.assert_array_equal(st_.x_cur, x0)
    assert st_.block_updates == 0


def test_dual_identity_after_every_step():
    p, rp, _, _ = _rp(seed=1)
    sch = compute_radual_schedule(rp.m, rp.L, rp.mu, rp.abar)
    rng = np.random.default_rng(2)
    st_ = RaDualState.start(rp, rng.standard_normal(p.total_dim), rng.standard_normal(p.n))
    x_hist = [st_.x_cur.copy(), st_.x_cur.copy()]
    for _ in range(300):
        radual_step(st_, sch, rp, rng=rng)
        expect = -psi_m_grad(rp, st_, -st_.g)
        assert np.linalg.norm(st_.y - expect) <= 1e-12 * (1 + np.linalg.norm(expect))
        # x_prev tracks the previous iterate exactly
        np.testing.assert_array_equal(st_.x_prev, x_hist[-1])
        x_hist.append(st_.x_cur.copy())
        np.testing.assert_array_equal(st_.xm, -st_.g)
        res = np.linalg.norm(psi_m_grad(rp, st_, st_.xm) + st_.y)
        assert res <= 1e-9 * (1 + np.linalg.norm(st_.y))


def test_incremental_ax_and_accounting():
    p, rp, _, _ = _rp(seed=2, nb=9)
    sch = compute_radual_schedule(rp.m, rp.L, rp.mu, rp.abar)
    st_ = RaDualState.start(rp, np.zeros(p.total_dim), rp.b.copy())
    radual_solve(st_, sch, rp, make_rng(5), s=2500, check=False)
    fresh = rp.A_full @ st_.x_cur
    assert np.linalg.norm(st_.ax - fresh) <= 1e-9 * max(1.0, np.linalg.norm(fresh))
    assert st_.block_updates == 2500


def test_drift_is_detected():
    p, rp, _, _ = _rp(seed=3)
    sch = compute_radual_schedule(rp.m, rp.L, rp.mu, rp.abar)
    st_ = RaDualState.start(rp, np.zeros(p.total_dim), rp.b.copy())
    st_.ax = st_.ax + 1.0
    with pytest.raises(InvariantError):
        radual_solve(st_, sch, rp, make_rng(0), s=1000)


def test_batch_equals_randomized_with_one_block():
    p, rp, _, _ = _rp(seed=4, nb=1, n=3)
    sch_r = compute_radual_schedule(2, rp.L, rp.mu, rp.abar)
    out = []
    for batch in (False, True):
        st_ = RaDualState.start(rp, np.array([0.5]), np.ones(3))
        radual_solve(st_, sch_r, rp, make_rng(1), s=40, batch=batch)
        out.append(st_)
    np.testing.assert_array_equal(out[0].x_cur, out[1].x_cur)
    np.testing.assert_array_equal(out[0].g, out[1].g)
    x1, xm1, r1 = rapdual_run(p, RapDualConfig(k=3, s_override=25, seed=2))
    x2, xm2, r2 = rapdual_run(p, RapDualConfig(k=3, s_override=25, seed=2, batch=True))
    np.testing.assert_array_equal(np.concatenate(x1), np.concatenate(x2))
    np.testing.assert_array_equal(xm1, xm2)
    assert r1.metadata["schedule"] == r2.metadata["schedule"]


def test_batch_step_updates_every_block():
    p, rp, _, _ = _rp(seed=5, nb=4)
    sch = compute_radual_schedule(2, rp.L, rp.mu, 3.0)
    st_ = RaDualState.start(rp, np.zeros(p.total_dim), rp.b.copy())
    radual_batch_step(st_, sch, rp)
    assert st_.block_updates == 4
    assert np.all(st_.x_cur != 0)


def test_run_starts_feasible_and_accounts():
    p, rp, _, _ = _rp(seed=6, nb=10, n=5)
    xs, xm, rec = rapdual_run(p, RapDualConfig(k=4, s_override=37, seed=3))
    assert rec.metadata["initial_feasibility_sq"] == 0.0
    assert rec.rows[0].passes == 0.0 and rec.rows[0].feasibility_sq == 0.0
    assert rec.block_updates == 4 * 37
    for row in rec.rows:
        assert row.passes == row.evals / 10
    assert rec.metadata["max_last_block_residual"] <= 1e-9


def test_degenerate_run_returns_initialization():
    p, rp, _, _ = _rp(seed=7)
    xs, xm, rec = rapdual_run(p, RapDualConfig(k=1, s_override=0))
    np.testing.assert_array_equal(np.concatenate(xs), np.zeros(p.total_dim))
    np.testing.assert_array_equal(xm, rp.b)


def test_feasibility_shrinks_with_outer_iterations():
    rng = np.random.default_rng(8)
    p, _, _, _ = quadratic_multiblock(rng, 10, 5, L=4.0, mu=1.0, identity_last=True)
    feas = {}
    for k in (1, 8):
        vals = []
        for seed in range(20):
            xs, xm, rec = rapdual_run(p, RapDualConfig(k=k, s_override=200, seed=seed,
                                                       output_rule="uniform"))
            vals.append(reformulate(p).feasibility_sq(xs, xm))
        feas[k] = np.mean(vals)
    assert feas[8] < feas[1]


def test_box_blocks_stay_feasible():
    rng = np.random.default_rng(9)
    box = FeasibleSet.box([-0.05], [0.05])
    blocks = [BlockSpec(QuadraticOracle(np.eye(1), c=rng.standard_normal(1) * 5),
                        rng.standard_normal((3, 1)), box) for _ in range(4)]
    p = MultiBlockProblem(blocks, QuadraticOracle(np.eye(3)), np.eye(3), rng.standard_normal(3),
                          L=2.0, mu=1.0)
    xs, xm, rec = rapdual_run(p, RapDualConfig(k=3, s_override=100))
    assert all(box.contains(x) for x in xs)


def test_config_validation():
    with pytest.raises(ValueError):
        RapDualConfig(k=0)
    with pytest.raises(ValueError):
        RapDualConfig(output_rule="last")
    with pytest.raises(ValueError):
        RapDualConfig(s_factor=-1.0)
