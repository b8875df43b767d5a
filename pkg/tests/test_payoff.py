import math

import numpy as np
import pytest

from cvagreeks import adcore as ad
from cvagreeks.credit import DefaultSample, sample_default_normals
from cvagreeks.curves import HazardCurve, ZeroCurve
from cvagreeks.hullwhite import HullWhiteModel, SwapSpec, make_grid, simulate_paths
from cvagreeks.payoff import CvaPayoff, IndicatorPayoff, cva_loss

SWAP = SwapSpec()


def forced(tau, horizon=10.0, tau2=None):
    """Sample in which every path has the given first-name default time."""
    tau = np.asarray(tau, dtype=float)
    rows = [tau] if tau2 is None else [tau, np.asarray(tau2, dtype=float)]
    t = np.stack(rows)
    d = t <= horizon
    return DefaultSample(np.zeros_like(t), np.zeros_like(t), np.where(d, t, np.inf), d, horizon)


@pytest.fixture(scope="module")
def payoff(hw):
    return CvaPayoff(hw, SWAP, 0.6)


@pytest.fixture(scope="module")
def paths(hw):
    return simulate_paths(hw, make_grid(SWAP.payment_dates, 12), 1000, np.random.default_rng(17))


def test_loss_arithmetic():
    assert cva_loss(0.6, 0.95, 1e6) == pytest.approx(-570_000.0, rel=1e-15)
    assert cva_loss(0.6, 0.95, -1e6) == 0.0


def test_survivors_and_out_of_the_money_pay_nothing(payoff, paths, hw):
    n = paths.n_paths
    assert np.all(payoff.evaluate(forced(np.full(n, np.inf)), paths) == 0.0)
    payer = CvaPayoff(hw, SwapSpec(fixed_rate=0.2, receive_fixed=False), 0.6)
    assert np.all(payer.evaluate(forced(np.full(n, 4.5)), paths) == 0.0)


def test_lgd_zero(hw, paths):
    p = CvaPayoff(hw, SWAP, 0.0)
    assert np.all(p.evaluate(forced(np.full(paths.n_paths, 2.5)), paths) == 0.0)
    assert np.all(p.jumps_at(forced(np.full(paths.n_paths, 2.5)), paths) == 0.0)


def test_payoff_matches_direct_formula(payoff, paths, hw):
    n = paths.n_paths
    tau = np.full(n, 4.4)
    f = payoff.evaluate(forced(tau), paths)
    from cvagreeks.hullwhite import swap_npv
    x, integ = paths.state_at(tau)
    npv = swap_npv(hw, tau, x, integ - paths.integral[:, paths.index_of(4.0)], SWAP)
    np.testing.assert_allclose(f, -0.6 * hw.curve.discount(tau) * np.maximum(npv, 0.0), rtol=1e-14)
    assert np.any(f < 0)


def test_jumps_match_one_sided_values(payoff, paths):
    n = paths.n_paths
    jumps = payoff.jumps_at(forced(np.full(n, 1.0)), paths)
    for i, d in enumerate(SWAP.payment_dates):
        right = payoff.evaluate(forced(np.full(n, d)), paths)
        left = payoff.evaluate(forced(np.full(n, d - 1e-12)), paths)
        scale = max(1.0, float(np.max(np.abs(jumps[i]))))
        np.testing.assert_allclose(right - left, jumps[i], rtol=0, atol=1e-10 * scale + 1e-4)


def test_payoff_continuous_between_dates(payoff, paths):
    n = paths.n_paths
    for t in (0.4, 3.7, 8.2):
        a = payoff.evaluate(forced(np.full(n, t)), paths)
        b = payoff.evaluate(forced(np.full(n, t + 1e-9)), paths)
        assert np.max(np.abs(a - b)) < 1.0


def test_zero_cash_flows_give_zero_jumps():
    r = 0.01
    curve = ZeroCurve(np.array([1.0, 30.0]), np.array([r, r]))
    model = HullWhiteModel(0.0744, 0.0, curve)
    swap = SwapSpec(fixed_rate=math.expm1(r))
    p = CvaPayoff(model, swap, 0.6)
    paths = simulate_paths(model, make_grid(swap.payment_dates, 12), 4, np.random.default_rng(0))
    jumps = p.jumps_at(forced(np.full(4, 1.0)), paths)
    np.testing.assert_allclose(jumps, 0.0, atol=1e-6)


def test_stochastic_discount_reduces_to_curve_without_volatility(estr):
    model = HullWhiteModel(0.0744, 0.0, estr)
    paths = simulate_paths(model, make_grid(SWAP.payment_dates, 12), 5, np.random.default_rng(0))
    s = forced(np.linspace(0.3, 9.7, 5))
    swap = SwapSpec(fixed_rate=0.02)
    a = CvaPayoff(model, swap, 0.6).evaluate(s, paths)
    b = CvaPayoff(model, swap, 0.6, discounting="stochastic").evaluate(s, paths)
    np.testing.assert_allclose(a, b, rtol=1e-14)
    assert np.all(a < 0)


def test_rate_gradient_matches_fd(payoff, paths, ba):
    z = np.random.default_rng(2).standard_normal((1, paths.n_paths))
    s = sample_default_normals([ba], 10.0, z)
    base = payoff.evaluate(s, paths)
    psi0 = payoff.psi0
    lanes = np.repeat(psi0[:, None], paths.n_paths, axis=1)
    g = ad.gradient(ad.record(lambda psi: payoff.evaluate(s, paths, psi=psi), psi=lanes))["psi"]
    keep = base < -1.0
    assert np.count_nonzero(keep) > 20
    for j in range(psi0.size):
        up, dn = psi0.copy(), psi0.copy()
        up[j] += 1e-6
        dn[j] -= 1e-6
        fd = (payoff.evaluate(s, paths, psi=up) - payoff.evaluate(s, paths, psi=dn)) / 2e-6
        scale = np.maximum(1.0, np.max(np.abs(g[:, keep]), axis=0))
        assert np.all(np.abs(g[j, keep] - fd[keep]) <= 1e-4 * np.abs(fd[keep]) + 1e-7 * scale)


def test_payoff_has_no_credit_dependence(payoff, paths, ba):
    s = sample_default_normals([ba], 10.0, np.random.default_rng(3).standard_normal((1, paths.n_paths)))
    rec = ad.record(lambda psi, theta: payoff.evaluate(s, paths, psi=psi),
                    psi=payoff.psi0, theta=np.asarray(ba.zero_intensities))
    assert np.all(ad.gradient(rec)["theta"] == 0.0)


def test_bilateral_indicator(hw, paths):
    p = CvaPayoff(hw, SWAP, 0.6, mode="bilateral")
    n = paths.n_paths
    first = p.in_loss(forced(np.full(n, 3.0), tau2=np.full(n, 5.0)))
    second = p.in_loss(forced(np.full(n, 5.0), tau2=np.full(n, 3.0)))
    alone = p.in_loss(forced(np.full(n, 5.0), tau2=np.full(n, np.inf)))
    assert first.all() and not second.any() and alone.all()
    with pytest.raises(NotImplementedError):
        p.jumps_at(forced(np.full(n, 3.0), tau2=np.full(n, 5.0)), paths)


def test_indicator_payoff():
    p = IndicatorPayoff(1.0, 2.0)
    s = forced(np.array([0.5, 1.0, 1.5]), horizon=1.0)
    np.testing.assert_array_equal(p.evaluate(s), [2.0, 2.0, 0.0])
    np.testing.assert_array_equal(p.jumps_at(s), [[-2.0, -2.0, -2.0]])


def test_invalid_configuration(hw):
    with pytest.raises(ValueError):
        CvaPayoff(hw, SWAP, 0.6, mode="trilateral")
    with pytest.raises(ValueError):
        CvaPayoff(hw, SWAP, 1.2)
