import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from cvagreeks.credit import (DefaultSample, GaussianCopula2, decompose_payoff, reconstruct_payoff,
                              sample_default, sample_default_independent, sample_default_normals,
                              sample_default_pair, weight_independent, weight_pair_copula,
                              weight_pair_copula_unfrozen, weight_pair_survivor_free,
                              weight_single_censored)
from cvagreeks.curves import HazardCurve

FLAT = HazardCurve.flat


def single(lam, tau, T):
    """Sample with a prescribed default time on a flat curve."""
    curve = FLAT(lam)
    return curve, sample_default(curve, T, -np.expm1(-lam * np.atleast_1d(tau)))


def pair_sample(curves, rho, n, seed, T=10.0):
    z = np.random.default_rng(seed).standard_normal((2, n))
    return sample_default_pair(curves, T, GaussianCopula2(rho), z[0], z[1])


def zscore(x):
    x = np.asarray(x)
    se = x.std(axis=-1, ddof=1) / math.sqrt(x.shape[-1])
    m = x.mean(axis=-1)
    return np.where(se > 0, np.abs(m) / np.where(se > 0, se, 1.0), np.where(m == 0, 0.0, np.inf))


# sampling

def test_sample_default_examples():
    s = sample_default(FLAT(0.02), 10.0, np.array([0.5]))
    assert not s.defaulted[0, 0] and np.isinf(s.tau[0, 0])
    assert -math.log(0.5) / 0.02 == pytest.approx(34.657, abs=1e-3)
    s = sample_default(FLAT(0.2), 10.0, np.array([0.5]))
    assert s.defaulted[0, 0]
    assert s.tau[0, 0] == pytest.approx(-math.log(0.5) / 0.2, rel=1e-14)
    assert s.tau[0, 0] == pytest.approx(3.4657, abs=1e-4)


def test_default_boundary_is_closed(ba):
    L = float(ba.cumulative_hazard(10.0))
    s = sample_default(ba, 10.0, np.array([-math.expm1(-L)]))
    assert s.defaulted[0, 0] == (s.eps[0, 0] <= L)
    s = sample_default_independent([ba], 10.0, np.array([[-math.expm1(-L)]]))
    assert s.defaulted[0, 0] == (s.eps[0, 0] <= L)


def test_sample_invariants(ba, rng):
    s = sample_default_normals([ba], 10.0, rng.standard_normal((1, 20_000)))
    d = s.defaulted[0]
    np.testing.assert_allclose(ba.cumulative_hazard(s.tau[0, d]), s.eps[0, d], rtol=1e-14)
    assert np.all(s.tau[0, d] <= 10.0)
    assert np.all(s.eps[0, ~d] > float(ba.cumulative_hazard(10.0)))
    assert np.all(np.isinf(s.tau[0, ~d]))
    np.testing.assert_array_equal(s.censored_times()[0, ~d], 10.0)


def test_pair_independent_joint_survival():
    curves = [FLAT(0.05), FLAT(0.08)]
    s = pair_sample(curves, 0.0, 100_000, 3)
    both = (~s.defaulted[0] & ~s.defaulted[1]).astype(float)
    p = math.exp(-0.5) * math.exp(-0.8)
    assert abs(both.mean() - p) <= 3 * both.std(ddof=1) / math.sqrt(both.size)


def test_pair_near_comonotone():
    s = pair_sample([FLAT(0.05), FLAT(0.08)], 0.999, 20_000, 4)
    ranks = [stats.rankdata(s.u[i]) for i in range(2)]
    assert stats.spearmanr(ranks[0], ranks[1])[0] > 0.99
    i, j = np.random.default_rng(0).integers(0, 20_000, size=(2, 5000))
    far = np.abs(s.u[0, i] - s.u[0, j]) > 0.05
    assert np.all(np.sign(s.u[0, i] - s.u[0, j])[far] == np.sign(s.u[1, i] - s.u[1, j])[far])


def test_copula_rejects_unit_correlation():
    for rho in (1.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            GaussianCopula2(rho)


@pytest.mark.parametrize("rho", [-0.6, 0.0, 0.5, 0.9])
def test_copula_density_integrates_to_one(rho):
    x, w = np.polynomial.hermite_e.hermegauss(120)
    w = w / math.sqrt(2 * math.pi)
    y1, y2 = np.meshgrid(x, x, indexing="ij")
    dens = np.exp(GaussianCopula2(rho).log_density_normal(y1, y2))
    assert np.sum(w[:, None] * w[None, :] * dens) == pytest.approx(1.0, abs=1e-6)


def test_joint_default_probability_closed_form():
    cop = GaussianCopula2(0.5)
    p = -math.expm1(-1.0)
    ref = stats.multivariate_normal(cov=[[1, 0.5], [0.5, 1]]).cdf([special.ndtri(p)] * 2)
    assert float(cop.joint_lower(p, p)) == pytest.approx(ref, abs=1e-7)
    s = pair_sample([FLAT(0.1), FLAT(0.1)], 0.5, 400_000, 8)
    both = (s.defaulted[0] & s.defaulted[1]).astype(float)
    assert abs(both.mean() - ref) <= 4 * both.std(ddof=1) / math.sqrt(both.size)


def test_conditional_tail():
    assert GaussianCopula2(0.0).conditional_tail(0.6, 0.3) == pytest.approx(0.4, abs=1e-15)
    cop = GaussianCopula2(0.5)
    expect = 1 - stats.norm.cdf((stats.norm.ppf(0.6) - 0.5 * stats.norm.ppf(0.3)) / math.sqrt(0.75))
    assert cop.conditional_tail(0.6, 0.3) == pytest.approx(expect, rel=1e-13)
    z = np.random.default_rng(9).standard_normal(1_000_000)
    hit = (0.5 * stats.norm.ppf(0.3) + math.sqrt(0.75) * z > stats.norm.ppf(0.6)).astype(float)
    assert abs(hit.mean() - expect) <= 4 * hit.std(ddof=1) / math.sqrt(hit.size)


# single-name weight

def test_single_weight_examples():
    curve, s = single(0.02, 3.0, 10.0)
    w = weight_single_censored(curve, s, 10.0, hessian=True)
    assert w.value[0] == pytest.approx(-0.06 + math.log(0.02), rel=1e-12)
    assert w.value[0] == pytest.approx(-3.9720, abs=1e-4)
    assert w.grad[0, 0] == pytest.approx(47.0, rel=1e-10)
    assert w.hess[0, 0, 0] == pytest.approx(-2500.0, rel=1e-10)
    curve, s = single(0.02, 40.0, 10.0)
    w = weight_single_censored(curve, s, 10.0, hessian=True)
    assert w.value[0] == pytest.approx(-0.2, rel=1e-14)
    assert w.grad[0, 0] == pytest.approx(-10.0, rel=1e-12)
    assert w.hess[0, 0, 0] == pytest.approx(0.0, abs=1e-12)


def test_weight_rejects_mismatched_horizon():
    curve, s = single(0.02, 3.0, 10.0)
    with pytest.raises(ValueError):
        weight_single_censored(curve, s, 5.0)


def test_single_name_score_identity(ba):
    s = sample_default_normals([ba], 10.0, np.random.default_rng(21).standard_normal((1, 20_000)))
    w = weight_single_censored(ba, s, hessian=True)
    assert np.all(zscore(w.grad) < 4)
    h = w.hess + w.grad[:, None, :] * w.grad[None, :, :]
    assert np.all(zscore(h) < 4)


# pair weights

@pytest.fixture(scope="module")
def pair_curves(ba):
    return [ba, ba.with_intensities(0.5 * ba.zero_intensities)]


def test_pair_copula_at_zero_correlation_is_sum_of_singles(pair_curves):
    s = pair_sample(pair_curves, 0.0, 3000, 31)
    w = weight_pair_copula(pair_curves, s, GaussianCopula2(0.0))
    ref = weight_independent(pair_curves, s)
    np.testing.assert_allclose(w.value, ref.value, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(w.grad, ref.grad, rtol=1e-12, atol=1e-12)


def test_pair_copula_symmetry():
    curves = [FLAT(0.1, 10.0), FLAT(0.1, 10.0)]
    cop = GaussianCopula2(0.5)
    s = sample_default_pair(curves, 10.0, cop, np.array([-0.9, -0.6]), np.array([-0.3, -0.5]))
    swapped = DefaultSample(s.eps[::-1], s.u[::-1], s.tau[::-1], s.defaulted[::-1], s.horizon)
    assert np.all(s.defaulted)
    w, ws = weight_pair_copula(curves, s, cop), weight_pair_copula(curves, swapped, cop)
    np.testing.assert_allclose(w.value, ws.value, rtol=1e-13)
    np.testing.assert_allclose(w.grad, ws.grad[::-1], rtol=1e-12)


def test_frozen_and_unfrozen_gradients_agree(pair_curves):
    s = pair_sample(pair_curves, 0.5, 2000, 33)
    cop = GaussianCopula2(0.5)
    a = weight_pair_copula(pair_curves, s, cop)
    b = weight_pair_copula_unfrozen(pair_curves, s, cop)
    # values differ by parameter-free constants; only the gradients must agree
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-9, atol=1e-9)


def test_pair_copula_marginal_derivative():
    curves = [FLAT(0.1, 10.0), FLAT(0.05, 10.0)]
    s = pair_sample(curves, 0.5, 100_000, 34)
    w = weight_pair_copula(curves, s, GaussianCopula2(0.5))
    est = s.defaulted[0] * w.grad[0]
    exact = 10.0 * math.exp(-1.0)
    assert abs(est.mean() - exact) <= 3 * est.std(ddof=1) / math.sqrt(est.size)


@pytest.mark.parametrize("rho", [0.0, 0.5])
def test_pair_copula_score_identity(pair_curves, rho):
    s = pair_sample(pair_curves, rho, 20_000, 35)
    w = weight_pair_copula(pair_curves, s, GaussianCopula2(rho), hessian=True)
    assert np.all(zscore(w.grad) < 4)
    assert np.all(zscore(w.hess + w.grad[:, None, :] * w.grad[None, :, :]) < 4)


def test_survivor_free_independence_reduction(pair_curves):
    s = pair_sample(pair_curves, 0.0, 5000, 36)
    w = weight_pair_survivor_free(pair_curves, s, GaussianCopula2(0.0))
    ref = weight_independent(pair_curves, s)
    used = ~w.unused
    first = s.defaulted[0] & ~s.defaulted[1]
    assert np.any(first)
    np.testing.assert_allclose(w.value[used], ref.value[used], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(w.grad[:, used], ref.grad[:, used], rtol=1e-10, atol=1e-10)


def test_survivor_free_flags_unused_regions(pair_curves):
    s = pair_sample(pair_curves, 0.5, 5000, 37)
    w = weight_pair_survivor_free(pair_curves, s, GaussianCopula2(0.5))
    np.testing.assert_array_equal(w.unused, ~s.defaulted[0])
    assert np.all(w.value[w.unused] == 0.0) and np.all(w.grad[:, w.unused] == 0.0)
    full = weight_pair_survivor_free(pair_curves, s, GaussianCopula2(0.5), full=True)
    assert not np.any(full.unused)


def test_survivor_free_score_identity(pair_curves):
    s = pair_sample(pair_curves, 0.5, 20_000, 38)
    w = weight_pair_survivor_free(pair_curves, s, GaussianCopula2(0.5), hessian=True, full=True)
    assert np.all(zscore(w.grad) < 4)
    assert np.all(zscore(w.hess + w.grad[:, None, :] * w.grad[None, :, :]) < 4)


# decomposition

def test_decomposition_examples():
    a = decompose_payoff({frozenset(): 2.0, frozenset({1}): 5.0}, [1])
    assert a[frozenset()] == 2.0 and a[frozenset({1})] == 3.0
    vals = {frozenset(J): len(J) for k in range(3) for J in itertools.combinations([1, 2], k)}
    assert decompose_payoff(vals, [1, 2])[frozenset({1, 2})] == 0


def test_decomposition_missing_subset_is_named():
    vals = {frozenset(): 0.0, frozenset({"a"}): 1.0, frozenset({"b"}): 2.0}
    with pytest.raises(KeyError, match=r"\{a, b\}"):
        decompose_payoff(vals, ["a", "b"])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(-1000, 1000), min_size=8, max_size=8))
def test_decomposition_reconstructs_every_region(n, raw):
    names = list(range(n))
    subsets = [frozenset(J) for k in range(n + 1) for J in itertools.combinations(names, k)]
    vals = {J: float(v) for J, v in zip(subsets, raw)}
    addends = decompose_payoff(vals, names)
    for J in subsets:
        assert reconstruct_payoff(addends, J) == vals[J]
