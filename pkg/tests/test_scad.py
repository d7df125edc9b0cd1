import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rapopt.scad import (
    ProxError,
    ScadParams,
    SeparableScad,
    build_scad_ls,
    scad_grad,
    scad_hess,
    scad_prox_vec,
    scad_scalar_prox,
    scad_value,
)

P = ScadParams(lam=2.0, gamma=4.0, eps=1e-3, rho=0.01)

# reference values computed at 40 digits with mpmath
SCAD_AT_0 = 0.06324555320336758664
SCAD_AT_4 = 7.33349999479182942073
SCAD_PRIME_AT_1 = 1.99900074937554638326
PROX_REFERENCE = -0.49501017149898593539


def test_scad_value_examples():
    assert scad_value(0.0, P) == pytest.approx(SCAD_AT_0, rel=1e-15)
    assert scad_value(10.0, P) == 10.0
    assert scad_value(4.0, P) == pytest.approx(SCAD_AT_4, rel=1e-15)


def test_scad_grad_examples():
    assert scad_grad(0.0, P) == 0.0
    assert scad_grad(10.0, P) == 0.0
    assert scad_grad(1.0, P) == pytest.approx(SCAD_PRIME_AT_1, rel=1e-15)


def test_scad_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(-12, 12, 100)
    h = 1e-6
    fd = (scad_value(x + h, P) - scad_value(x - h, P)) / (2 * h)
    g = scad_grad(x, P)
    assert np.all(np.abs(g - fd) <= 1e-6 * np.maximum(1.0, np.abs(g)))


def test_scad_hess_matches_finite_differences_away_from_seams():
    x = np.array([-9.0, -5.0, -0.5, 0.0, 0.3, 3.0, 6.5, 20.0])
    h = 1e-6
    fd = (scad_grad(x + h, P) - scad_grad(x - h, P)) / (2 * h)
    np.testing.assert_allclose(scad_hess(x, P), fd, rtol=1e-5, atol=1e-6)


def _seam_x(r, eps):
    return math.sqrt(r * r - eps)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10), st.floats(2.05, 10), st.floats(1e-6, 1e-2))
def test_scad_continuous_at_both_seams(lam, gamma, eps):
    p = ScadParams(lam=lam, gamma=gamma, eps=eps)
    for r in (lam, gamma * lam):
        left = scad_value(_seam_x(r, eps) * (1 - 1e-15), p)
        right = scad_value(_seam_x(r, eps) * (1 + 1e-15), p)
        assert abs(left - right) <= 1e-12 * max(1.0, abs(left))
        # both branch formulas agree exactly at the seam value of r
        inner = lam * r if r == lam else (2 * gamma * lam * r - r * r - lam * lam) / (2 * (gamma - 1))
        outer = ((2 * gamma * lam * r - r * r - lam * lam) / (2 * (gamma - 1)) if r == lam
                 else lam * lam * (gamma + 1) / 2)
        assert abs(inner - outer) <= 1e-12 * max(1.0, abs(inner))


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50))
def test_scad_even(x):
    assert scad_value(x, P) == scad_value(-x, P)
    assert scad_grad(x, P) == -scad_grad(-x, P)


def test_params_validation():
    for bad in [dict(lam=0.0), dict(gamma=2.0), dict(eps=0.0), dict(rho=-1.0)]:
        with pytest.raises(ValueError):
            ScadParams(**bad)
    assert ScadParams.from_dict(P.to_dict()) == P


def test_build_constants():
    A = np.zeros((3, 2))
    A[0] = [10.0, 0.0]
    p = build_scad_ls(A, np.zeros(3), P)
    assert p.mu == pytest.approx(0.01 / 6, rel=1e-15)
    assert p.L == pytest.approx(100.31622776601683793, rel=1e-14)


def test_build_rejects_zero_rho():
    with pytest.raises(ValueError, match="rho"):
        build_scad_ls(np.ones((2, 2)), np.ones(2), ScadParams(rho=0.0))
    with pytest.raises(ValueError):
        build_scad_ls(np.ones((2, 2)), np.ones(3), P)


def test_single_row_gradient():
    p = build_scad_ls(np.array([[1.0, 0.0]]), np.zeros(1), P)
    g = p.component_grad(0, np.array([1.0, 0.0]))
    want = np.array([1.0, 0.0]) + 0.005 * np.array([SCAD_PRIME_AT_1, 0.0])
    np.testing.assert_allclose(g, want, rtol=1e-15)


def test_row_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    p = build_scad_ls(rng.standard_normal((5, 4)), rng.standard_normal(5), ScadParams(rho=1.0))
    h = 1e-6
    for _ in range(20):
        x = rng.uniform(-10, 10, 4)
        i = int(rng.integers(5))
        g = p.component_grad(i, x)
        fd = np.array([(p.component_value(i, x + h * e) - p.component_value(i, x - h * e)) / (2 * h)
                       for e in np.eye(4)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))
        np.testing.assert_allclose(p.gradient(x), np.mean([p.component_grad(j, x) for j in range(5)], 0),
                                   rtol=1e-12, atol=1e-14)


def test_lower_curvature_certificate():
    rng = np.random.default_rng(2)
    params = ScadParams(rho=1.0)
    p = build_scad_ls(rng.standard_normal((4, 3)), rng.standard_normal(4), params)
    for _ in range(500):
        x, y = rng.uniform(-10, 10, 3), rng.uniform(-10, 10, 3)
        i = int(rng.integers(4))
        gap = p.component_value(i, x) - p.component_value(i, y) - p.component_grad(i, y) @ (x - y)
        assert gap >= -0.5 * p.mu * np.sum((x - y) ** 2) - 1e-9


def test_prox_pure_quadratic_and_symmetric_cases():
    p0 = ScadParams(rho=0.0)
    assert scad_scalar_prox(1.5, 2.0, 3.0, p0) == 3.0 - 0.75
    assert scad_scalar_prox(0.0, 1.0, 0.0, P) == 0.0


def test_prox_matches_brute_force_reference():
    x = scad_scalar_prox(1.0, 2.0, 0.0, P)
    assert x == pytest.approx(PROX_REFERENCE, abs=1e-8)


def test_prox_rejects_nonconvex_input():
    p = ScadParams(rho=6.0)  # weak convexity 1
    with pytest.raises(ValueError):
        scad_scalar_prox(0.0, 1.0, 0.0, p)


def test_prox_reports_nonconvergence():
    with pytest.raises(ProxError):
        scad_scalar_prox(3.7, 0.9, 1.3, ScadParams(rho=2.0), tol=0.0, max_iter=2)


@settings(max_examples=300, deadline=None)
@given(st.floats(-100, 100), st.floats(0.34, 50), st.floats(-100, 100), st.floats(0, 2))
def test_prox_stationarity(lin, quad, center, rho):
    p = ScadParams(rho=rho)
    x = scad_scalar_prox(lin, quad, center, p)
    dq = 0.5 * rho * scad_grad(x, p) + lin + quad * (x - center)
    # either the residual test holds or the root is pinned between neighbouring doubles
    assert abs(dq) <= 1e-12 * (1 + abs(x)) or abs(dq) <= 8 * quad * np.spacing(max(abs(x), 1.0)) * 4


def test_vector_prox_equals_scalar_prox():
    rng = np.random.default_rng(3)
    p = ScadParams(rho=2.0)
    lin, center = rng.normal(size=500) * 5, rng.normal(size=500) * 5
    v = scad_prox_vec(lin, 0.7, center, p)
    s = np.array([scad_scalar_prox(a, 0.7, c, p) for a, c in zip(lin, center)])
    np.testing.assert_array_equal(v, s)
    o = SeparableScad(500, p)
    np.testing.assert_array_equal(o.prox(lin, 0.7, center), s)
