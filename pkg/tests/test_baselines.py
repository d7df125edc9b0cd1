import numpy as np
import pytest

from _instances import quadratic_multiblock, quadratic_sum
from rapopt.baselines import (
    BaselineConfig,
    run_admm,
    run_ag,
    run_svrg,
    svrg_gradient,
    tune_inner_iterations,
)
from rapopt.metrics import SolverDivergence, mean_trajectory
from rapopt.problems import reformulate
from rapopt.scad import ScadParams, build_scad_ls


def _scad(m=40, n=8, seed=0):
    rng = np.random.default_rng(seed)
    return build_scad_ls(rng.standard_normal((m, n)), rng.standard_normal(m), ScadParams(rho=0.5))


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(method="sgd")
    with pytest.raises(ValueError):
        BaselineConfig(max_passes=0)
    with pytest.raises(ValueError):
        BaselineConfig(stop_tol=-1.0)


def test_svrg_anchor_identity_is_exact():
    p = _scad()
    rng = np.random.default_rng(1)
    anchor = rng.standard_normal(p.n)
    full = p.gradient(anchor)
    for i in range(p.m):
        np.testing.assert_array_equal(svrg_gradient(p, i, anchor, anchor, full), full)


def test_svrg_zero_epoch_is_anchor_evaluation():
    p = _scad()
    x, rec = run_svrg(p, BaselineConfig(step_params={"epoch_length": 0}, max_passes=5))
    np.testing.assert_array_equal(x, np.zeros(p.n))
    assert [r.passes for r in rec.rows] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert rec.stop_reason == "max_passes"


def test_svrg_decreases_gradient_on_average():
    rng = np.random.default_rng(2)
    p, _, _ = quadratic_sum(rng, 20, 5, L=10.0, mu=1.0)
    trajs = []
    for seed in range(20):
        _, rec = run_svrg(p, BaselineConfig(seed=seed, max_passes=40, stop_tol=0.0))
        trajs.append({"pass": rec.passes, "g": np.array([r.grad_norm_sq for r in rec.rows])})
    grid, mean = mean_trajectory(trajs, "g", grid=np.arange(0.0, 41.0, 2.0))
    assert np.all(np.diff(mean) < 0)


def test_svrg_counts_two_evaluations_per_inner_step():
    p = _scad(m=10)
    _, rec = run_svrg(p, BaselineConfig(max_passes=3, stop_tol=0.0))
    # each epoch is m anchor gradients plus 2 m inner evaluations
    assert rec.component_grad_evals == 3 * p.m
    assert rec.metadata["step"] == pytest.approx(1 / (3 * p.L * p.m ** (2 / 3)))


def test_ag_without_momentum_is_gradient_descent():
    p = _scad()
    x, rec = run_ag(p, BaselineConfig(method="ag", step_params={"momentum": False},
                                      max_passes=15, stop_tol=0.0))
    z = np.zeros(p.n)
    for _ in range(15):
        z = z - p.gradient(z) / (2 * p.L)
    np.testing.assert_array_equal(x, z)


def test_ag_pass_counter_steps_by_one():
    p = _scad()
    _, rec = run_ag(p, BaselineConfig(method="ag", max_passes=12, stop_tol=0.0))
    assert [r.passes for r in rec.rows] == [float(i) for i in range(13)]
    assert rec.component_grad_evals == 12 * p.m


def test_ag_beats_gradient_descent_on_convex_quadratic():
    rng = np.random.default_rng(3)
    p, _, _ = quadratic_sum(rng, 2, 50, L=100.0, mu=1e-4)
    cfg = dict(max_passes=30, stop_tol=0.0)
    _, acc = run_ag(p, BaselineConfig(method="ag", step_params={"lambda_rule": "convex"}, **cfg))
    _, gd = run_ag(p, BaselineConfig(method="ag", step_params={"momentum": False}, **cfg))
    assert acc.final.objective < gd.final.objective


def test_stop_reasons_recorded():
    p = _scad()
    _, rec = run_ag(p, BaselineConfig(method="ag", max_passes=30000, stop_tol=1e-10))
    assert rec.stop_reason == "tolerance"
    assert rec.final.grad_norm_sq < 1e-10
    _, rec = run_svrg(p, BaselineConfig(max_passes=2, stop_tol=1e-10))
    assert rec.stop_reason == "max_passes"


def test_admm_feasibility_vanishes_on_convex_quadratic():
    rng = np.random.default_rng(4)
    p, xs_star, xm_star, _ = quadratic_multiblock(rng, 5, 3, L=4.0, mu=1.0)
    xs, xm, rec = run_admm(p, rho=16.0, cfg=BaselineConfig(method="admm", max_passes=20000,
                                                          stop_tol=1e-20))
    assert rec.final.feasibility_sq <= 1e-12
    assert np.linalg.norm(np.concatenate(xs) - np.concatenate(xs_star)) <= 1e-5


def test_admm_cycle_counts_m_updates():
    rng = np.random.default_rng(5)
    p, _, _, _ = quadratic_multiblock(rng, 7, 3, L=4.0, mu=1.0)
    _, _, rec = run_admm(p, rho=1.0, cfg=BaselineConfig(method="admm", stop_tol=0.0), k=3)
    assert rec.block_updates == 3 * p.m
    assert rec.final.passes == 3 * p.m / (p.m - 1)


def test_admm_penalty_tradeoff_is_recorded():
    rng = np.random.default_rng(6)
    p, _, _, _ = quadratic_multiblock(rng, 5, 3, L=4.0, mu=1.0)
    cfg = BaselineConfig(method="admm", stop_tol=0.0)
    runs = {rho: run_admm(p, rho=rho, cfg=cfg, k=5)[2] for rho in (1.0, 1e4)}
    for rho, rec in runs.items():
        assert rec.metadata["rho"] == rho
        assert all(r.feasibility_sq is not None for r in rec.rows)


def test_admm_rejects_nonpositive_penalty_and_reports_divergence():
    rng = np.random.default_rng(7)
    p, _, _, _ = quadratic_multiblock(rng, 2, 2, L=4.0, mu=1.0)
    with pytest.raises(ValueError):
        run_admm(p, rho=0.0)
    rng = np.random.default_rng(4)
    p, _, _, _ = quadratic_multiblock(rng, 5, 3, L=4.0, mu=1.0)
    with pytest.raises(SolverDivergence):
        with np.errstate(all="ignore"):
            run_admm(p, rho=4.0, cfg=BaselineConfig(method="admm", max_passes=5000, stop_tol=0.0))


def test_tune_single_factor_and_argmin():
    p = _scad(m=30, n=5)
    res = tune_inner_iterations(p, factors=[0.5], budget_passes=3)
    assert res.best_factor == 0.5
    res = tune_inner_iterations(p, factors=(1.0, 0.1, 0.01), budget_passes=10, seed=2)
    best = res.final_grad_norm_sq[res.best_factor]
    assert all(best <= v for v in res.final_grad_norm_sq.values())
    again = tune_inner_iterations(p, factors=(1.0, 0.1, 0.01), budget_passes=10, seed=2)
    assert again.best_factor == res.best_factor
    assert again.final_grad_norm_sq == res.final_grad_norm_sq


def test_tune_rejects_empty():
    with pytest.raises(ValueError):
        tune_inner_iterations(_scad(), factors=[])
