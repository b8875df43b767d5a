import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvagreeks.convert import (CalibrationResiduals, first_order_fd_direction, first_order_implicit,
                               h_halving_diagnostic, implicit_adjoint, market_cross_gamma, market_gamma,
                               second_order_fd_direction)


def sqrt_calibration(c):
    """``b(theta, c) = theta^2 - c`` at its root ``theta = sqrt(c)``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    th = np.sqrt(c)
    return CalibrationResiduals(th, c, th ** 2 - c, np.diag(2 * th), -np.eye(c.size),
                                d2b_dtheta2=2.0 * np.eye(c.size)[:, :, None] * np.eye(c.size)[:, None, :])


def ratio_calibration(c, q):
    """``b(theta, c, q) = theta q - c`` at ``theta = c / q``."""
    th = np.array([c / q])
    return CalibrationResiduals(th, np.array([c]), th * q - c, np.array([[q]]), np.array([[-1.0]]),
                                q=np.array([q]), db_dq=th[:, None], d2b_dtheta_dq=np.ones((1, 1, 1)))


def test_desk_case_first_order():
    rng = np.random.default_rng(0)
    theta = rng.uniform(0.01, 0.05, 5)
    p = rng.normal(size=5)
    res = CalibrationResiduals.bootstrap(theta, theta * 0.6, 0.6)
    res.check()
    np.testing.assert_allclose(first_order_implicit(p, res).dP_dc, p / 0.6, rtol=1e-14)


def test_identity_calibration_passes_through():
    p = np.array([1.0, -2.0, 3.0])
    res = CalibrationResiduals(np.ones(3), np.ones(3), np.zeros(3), np.eye(3), -np.eye(3))
    np.testing.assert_array_equal(first_order_implicit(p, res).dP_dc, p)


def test_two_by_two_against_dense_solve():
    J = np.array([[2.0, 0.5], [-0.3, 1.5]])
    Bc = np.array([[-1.0, 0.2], [0.1, -0.8]])
    p = np.array([0.7, -1.1])
    res = CalibrationResiduals(np.zeros(2), np.zeros(2), np.zeros(2), J, Bc)
    expect = -p @ np.linalg.inv(J) @ Bc
    np.testing.assert_allclose(first_order_implicit(p, res).dP_dc, expect, rtol=1e-13)
    assert res.condition_number == pytest.approx(np.linalg.cond(J))


def test_rate_term_is_added():
    res = CalibrationResiduals.bootstrap(np.array([0.02]), np.array([0.012]), 0.6)
    out = first_order_implicit(np.array([1.0]), res, p_psi=np.array([2.0, 3.0]), dpsi_dq=np.eye(2))
    np.testing.assert_array_equal(out.dP_dq, [2.0, 3.0])


def test_singular_jacobian_fails_with_diagnostics():
    res = CalibrationResiduals(np.zeros(2), np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 4.0]]), -np.eye(2))
    with pytest.raises(np.linalg.LinAlgError, match="condition number"):
        first_order_implicit(np.ones(2), res)


def test_residual_check():
    res = CalibrationResiduals(np.zeros(1), np.zeros(1), np.array([1e-6]), np.eye(1), -np.eye(1))
    with pytest.raises(ValueError):
        res.check()


def test_fd_direction_linear_cases():
    lgd = 0.6
    p = np.array([0.3, -0.4, 1.2])
    calib = lambda m: m / lgd
    m = np.array([0.01, 0.02, 0.03])
    for j in range(3):
        mu = np.eye(3)[j]
        assert first_order_fd_direction(p, calib, m, mu, 1e-4) == pytest.approx(p[j] / lgd, rel=1e-9)
        assert first_order_fd_direction(p, calib, m, mu, 0.5) == pytest.approx(p[j] / lgd, rel=1e-12)
    with pytest.raises(ValueError):
        first_order_fd_direction(p, calib, m, np.eye(3)[0], 0.0)


def test_fd_direction_nonlinear_converges():
    c = 0.3
    calib = lambda m: m ** 2
    errs = [abs(first_order_fd_direction(np.array([1.0]), calib, np.array([c]), np.ones(1), h) - 2 * c)
            for h in (1e-2, 5e-3)]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=1e-3)


def test_second_order_fd_linear_calibration_is_exact():
    lgd = 0.6
    n = 3
    res = lambda m: CalibrationResiduals.bootstrap(m / lgd, m, lgd)
    abar = implicit_adjoint(res)
    P2 = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    p1 = np.array([0.1, 0.2, -0.3])
    m = np.array([0.01, 0.015, 0.02])
    for j in range(n):
        row = second_order_fd_direction(p1, P2, lambda x: x / lgd, m, np.eye(n)[j], 1e-4, abar)
        np.testing.assert_allclose(row, P2[j] / lgd ** 2, rtol=1e-7, atol=1e-9)


def test_market_gamma_desk_case():
    rng = np.random.default_rng(1)
    theta = rng.uniform(0.01, 0.05, 4)
    A = rng.normal(size=(4, 4))
    P2 = A + A.T
    res = CalibrationResiduals.bootstrap(theta, 0.6 * theta, 0.6)
    g = market_gamma(rng.normal(size=4), P2, res)
    np.testing.assert_allclose(g, P2 / 0.36, rtol=1e-12)
    np.testing.assert_array_equal(g, g.T)


def test_market_gamma_square_root_calibration():
    c = 0.7
    g = market_gamma(np.array([1.0]), np.zeros((1, 1)), sqrt_calibration(c))
    assert g[0, 0] == pytest.approx(-0.25 * c ** -1.5, rel=1e-8)


def test_market_gamma_agrees_with_fd_to_first_order():
    c = 0.7
    abar = implicit_adjoint(lambda m: sqrt_calibration(m[0]))
    exact = -0.25 * c ** -1.5
    diag = h_halving_diagnostic(
        lambda h: second_order_fd_direction(np.array([1.0]), np.zeros((1, 1)), np.sqrt, np.array([c]),
                                            np.ones(1), h, abar), 1e-2, n=5, reference=exact)
    assert np.all((diag.ratios >= 1.7) & (diag.ratios <= 2.3))
    assert diag.errors[-1] < 1e-3


def test_market_cross_gamma_ratio_calibration():
    c, q = 0.6, 1.3
    th = c / q
    res = ratio_calibration(c, q)
    cross = market_cross_gamma(np.array([2 * th]), np.array([[2.0]]), np.zeros((1, 1)), res, np.zeros((1, 1)))
    assert cross[0, 0] == pytest.approx(-4 * c / q ** 3, rel=1e-8)


def test_market_cross_gamma_desk_case():
    rng = np.random.default_rng(2)
    theta = rng.uniform(0.01, 0.05, 3)
    res = CalibrationResiduals.bootstrap(theta, 0.6 * theta, 0.6)
    X = rng.normal(size=(3, 5))
    J = rng.normal(size=(5, 4))
    np.testing.assert_allclose(market_cross_gamma(np.ones(3), np.eye(3), X, res, J), X @ J / 0.6, rtol=1e-12)
    np.testing.assert_allclose(market_cross_gamma(np.ones(3), np.eye(3), X, res, np.eye(5)), X / 0.6, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_market_gamma_is_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.1, 1.0, n)
    J = np.diag(2 * th) + 0.1 * rng.normal(size=(n, n))
    T2 = rng.normal(size=(n, n, n))
    T2 = T2 + T2.transpose(0, 2, 1)
    res = CalibrationResiduals(th, th ** 2, np.zeros(n), J, -np.eye(n), d2b_dtheta2=T2,
                               d2b_dtheta_dc=rng.normal(size=(n, n, n)))
    g = market_gamma(rng.normal(size=n), np.diag(rng.normal(size=n)), res)
    np.testing.assert_array_equal(g, g.T)


def test_halving_diagnostic_on_known_order():
    d = h_halving_diagnostic(lambda h: np.array([3.0 + 5.0 * h]), 0.1, n=4, reference=np.array([3.0]))
    np.testing.assert_allclose(d.ratios, 2.0, rtol=1e-10)
    np.testing.assert_allclose(d.orders, 1.0, rtol=1e-9)
