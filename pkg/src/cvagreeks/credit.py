"""Default-time simulation with censoring at the horizon and conditional log-density weights.

Weights are evaluated for all paths at once: parameters are broadcast to
lane-shaped ``(n_params, n_paths)`` inputs, so a single reverse sweep returns
per-path score vectors and ``small_hessian`` returns per-path Hessians.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy import special

from . import adcore as ad
from .curves import HazardCurve

__all__ = [
    "DefaultSample", "GaussianCopula2", "CreditWeight",
    "sample_default", "sample_default_pair", "sample_default_independent", "sample_default_normals",
    "weight_single_censored", "weight_independent", "weight_pair_copula",
    "weight_pair_copula_unfrozen", "weight_pair_survivor_free",
    "decompose_payoff", "reconstruct_payoff",
]


@dataclass
class DefaultSample:
    """Triggers and censored default times, shape ``(n_names, n_paths)``.

    ``tau`` is ``inf`` where the name survives the horizon; for those names
    only ``eps > Lambda(T)`` is known to the weights.
    """

    eps: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    defaulted: np.ndarray
    horizon: float

    @property
    def n_names(self) -> int:
        return self.eps.shape[0]

    @property
    def n_paths(self) -> int:
        return self.eps.shape[1]

    def subset(self, idx) -> "DefaultSample":
        return DefaultSample(self.eps[:, idx], self.u[:, idx], self.tau[:, idx],
                             self.defaulted[:, idx], self.horizon)

    def censored_times(self) -> np.ndarray:
        """``min(tau, T)`` per name and path."""
        return np.where(self.defaulted, self.tau, self.horizon)


def _censor(curves: Sequence[HazardCurve], eps, u, T) -> DefaultSample:
    eps = np.atleast_2d(eps)
    u = np.atleast_2d(u)
    tau = np.full(eps.shape, np.inf)
    defaulted = np.zeros(eps.shape, dtype=bool)
    for i, curve in enumerate(curves):
        hit = eps[i] <= curve.cumulative_hazard(T)
        defaulted[i] = hit
        if np.any(hit):
            tau[i, hit] = curve.inverse_cumulative_hazard(eps[i, hit])
    return DefaultSample(eps, u, tau, defaulted, float(T))


def sample_default(curve: HazardCurve, T: float, u) -> DefaultSample:
    """Single name from uniform draws: ``eps = -log(1 - u)``, default iff ``eps <= Lambda(T)``."""
    u = np.asarray(u, dtype=float)
    eps = -np.log1p(-u)
    return _censor([curve], eps, u, T)


def sample_default_normals(curves: Sequence[HazardCurve], T: float, z) -> DefaultSample:
    """Independent names from standard normal scores, grades ``u = Phi(z)``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] != len(curves):
        raise ValueError("one row of draws per name is required")
    return _censor(curves, -special.log_ndtr(-z), special.ndtr(z), T)


def sample_default_independent(curves: Sequence[HazardCurve], T: float, u) -> DefaultSample:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != len(curves):
        raise ValueError("one row of uniforms per name is required")
    return _censor(curves, -np.log1p(-u), u, T)


@dataclass(frozen=True)
class GaussianCopula2:
    """Two-name Gaussian copula with correlation ``rho``."""

    rho: float

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"copula correlation must lie in (-1, 1), got {self.rho}")

    @property
    def scale(self) -> float:
        return float(np.sqrt((1.0 - self.rho) * (1.0 + self.rho)))

    def correlate(self, z1, z2):
        return z1, self.rho * z1 + self.scale * z2

    def log_density_normal(self, y1, y2):
        """Log copula density as a function of the normal scores (tapable)."""
        r = self.rho
        q = (r * r) * (y1 * y1 + y2 * y2) - (2.0 * r) * (y1 * y2)
        return -0.5 * (q / (1.0 - r * r) + np.log(1.0 - r * r))

    def log_density(self, u1, u2):
        return self.log_density_normal(special.ndtri(u1), special.ndtri(u2))

    def density(self, u1, u2):
        return np.exp(self.log_density(u1, u2))

    def dlog_density_dy(self, y1, y2):
        r = self.rho
        c = 1.0 - r * r
        return (r * y2 - r * r * y1) / c, (r * y1 - r * r * y2) / c

    def conditional_tail(self, u2, u1):
        """``P(U2 > u2 | U1 = u1)``."""
        return special.ndtr(-(special.ndtri(u2) - self.rho * special.ndtri(u1)) / self.scale)

    def joint_lower(self, p1, p2):
        """``P(U1 <= p1, U2 <= p2)``."""
        return ad.bvn_cdf(special.ndtri(p1), special.ndtri(p2), self.rho)

    def joint_upper(self, p1, p2):
        """``P(U1 > p1, U2 > p2)``."""
        return ad.bvn_cdf(-special.ndtri(p1), -special.ndtri(p2), self.rho)


def sample_default_pair(curves: Sequence[HazardCurve], T: float, copula: GaussianCopula2,
                        z1, z2) -> DefaultSample:
    """Two names whose grades ``u_i = Phi(y_i)`` come from correlated normal scores."""
    if len(curves) != 2:
        raise ValueError("the Gaussian copula is supported for exactly two names")
    y1, y2 = copula.correlate(np.asarray(z1, dtype=float), np.asarray(z2, dtype=float))
    y = np.stack([y1, y2])
    # -log(1 - Phi(y)) computed without cancellation
    eps = -special.log_ndtr(-y)
    return _censor(curves, eps, special.ndtr(y), T)


@dataclass
class CreditWeight:
    """Per-path weight ``w`` with its parameter gradient and (optionally) Hessian.

    ``grad`` has shape ``(n_params, n_paths)``, ``hess`` ``(n_params, n_params, n_paths)``.
    ``unused`` marks paths on which the estimator term is zeroed and the
    weight was not evaluated.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None
    unused: np.ndarray | None = None


def _lanes(curves: Sequence[HazardCurve], n: int) -> np.ndarray:
    theta = np.concatenate([np.asarray(c.zero_intensities, dtype=float) for c in curves])
    return np.repeat(theta[:, None], n, axis=1)


def _split(theta, curves):
    out, start = [], 0
    for c in curves:
        k = c.n_pillars
        out.append(c.with_intensities(theta[start:start + k]))
        start += k
    return out


def _evaluate(fn: Callable, curves, n: int, hessian: bool) -> CreditWeight:
    x = _lanes(curves, n)
    if hessian:
        h = ad.small_hessian(fn, x)
        return CreditWeight(np.broadcast_to(h.value, (n,)).copy(), h.gradient, h.entries)
    rec = ad.record(fn, theta=x)
    return CreditWeight(np.broadcast_to(rec.value, (n,)).copy(), ad.gradient(rec)["theta"])


def _name_terms(curve: HazardCurve, t_eff, defaulted):
    """``-Lambda(t_eff) + 1{default} log lambda(t_eff)``."""
    lam = curve.hazard(t_eff)
    if np.any(ad.value_of(lam) <= 0.0):
        raise ValueError("nonpositive hazard at a default time")
    return -curve.cumulative_hazard(t_eff) + defaulted * ad.log(lam)


def weight_single_censored(curve: HazardCurve, sample: DefaultSample, T: float | None = None,
                           hessian: bool = False) -> CreditWeight:
    """Censored single-name weight ``1{tau<=T}(-Lambda(tau) + log lambda(tau)) - 1{tau>T} Lambda(T)``."""
    return weight_independent([curve], sample, T, hessian)


def weight_independent(curves: Sequence[HazardCurve], sample: DefaultSample, T: float | None = None,
                       hessian: bool = False) -> CreditWeight:
    """Sum of single-name censored weights for independent triggers."""
    _check_horizon(sample, T)
    t_eff = sample.censored_times()
    defaulted = sample.defaulted

    def fn(theta):
        w = 0.0
        for i, c in enumerate(_split(theta, curves)):
            w = w + _name_terms(c, t_eff[i], defaulted[i])
        return w

    return _evaluate(fn, curves, sample.n_paths, hessian)


def _check_horizon(sample: DefaultSample, T):
    if T is not None and T != sample.horizon:
        raise ValueError(f"sample censored at {sample.horizon}, weight requested at {T}")


def _scores_from_eps(eps):
    # y = Phi^{-1}(1 - exp(-eps)) written to stay accurate for large eps
    return -ad.norm_ppf(ad.exp(-eps))


def weight_pair_copula(curves: Sequence[HazardCurve], sample: DefaultSample, copula: GaussianCopula2,
                       T: float | None = None, hessian: bool = False) -> CreditWeight:
    """Copula-corrected censored weight with frozen constants ``d_i``.

    ``w = log c(u) + sum_i [(d_i - 1) Lambda_i(tau_i ^ T) + 1{tau_i<=T} log lambda_i(tau_i)]``
    with ``d_i = d log c / d u_i * (1 - u_i)`` evaluated at the sampled grades
    and not differentiated.  The frozen form has the correct gradient but not
    the correct second derivative, so Hessians are taken from
    :func:`weight_pair_copula_unfrozen`.
    """
    if hessian:
        return weight_pair_copula_unfrozen(curves, sample, copula, T, hessian=True)
    _check_horizon(sample, T)
    if len(curves) != 2 or sample.n_names != 2:
        raise ValueError("pair copula weight needs exactly two names")
    y = -special.ndtri(np.exp(-sample.eps))
    log_c = copula.log_density_normal(y[0], y[1])
    if not np.all(np.isfinite(log_c)):
        raise ValueError("copula density is zero or undefined at the sampled grades")
    g = copula.dlog_density_dy(y[0], y[1])
    d = [g[i] / ad.norm_pdf(y[i]) * np.exp(-sample.eps[i]) for i in range(2)]
    t_eff = sample.censored_times()
    defaulted = sample.defaulted

    def fn(theta):
        w = log_c
        for i, c in enumerate(_split(theta, curves)):
            lam = c.hazard(t_eff[i])
            w = w + (d[i] - 1.0) * c.cumulative_hazard(t_eff[i]) + defaulted[i] * ad.log(lam)
        return w

    return _evaluate(fn, curves, sample.n_paths, False)


def weight_pair_copula_unfrozen(curves: Sequence[HazardCurve], sample: DefaultSample,
                                copula: GaussianCopula2, T: float | None = None,
                                hessian: bool = False) -> CreditWeight:
    """Copula-corrected censored weight with the grades moving with the parameters.

    Each trigger is ``eps_i(theta) = Lambda_i(tau_i ^ T; theta) + const`` with
    the constant fixed so that ``eps_i`` equals the sampled trigger at the
    current parameters (survivors keep their exact sampled grade).
    """
    _check_horizon(sample, T)
    if len(curves) != 2 or sample.n_names != 2:
        raise ValueError("pair copula weight needs exactly two names")
    t_eff = sample.censored_times()
    defaulted = sample.defaulted
    offsets = [sample.eps[i] - curves[i].cumulative_hazard(t_eff[i]) for i in range(2)]

    def fn(theta):
        w = 0.0
        ys = []
        for i, c in enumerate(_split(theta, curves)):
            e = c.cumulative_hazard(t_eff[i]) + offsets[i]
            ys.append(_scores_from_eps(e))
            w = w - e + defaulted[i] * ad.log(c.hazard(t_eff[i]))
        return w + copula.log_density_normal(ys[0], ys[1])

    return _evaluate(fn, curves, sample.n_paths, hessian)


def weight_pair_survivor_free(curves: Sequence[HazardCurve], sample: DefaultSample,
                              copula: GaussianCopula2, T: float | None = None,
                              hessian: bool = False, full: bool = False) -> CreditWeight:
    """Weight from the density of the observed default pattern only.

    On each region the weight is the log of the density of the defaulted
    names times the conditional probability that the others survive:

    * both defaulted: ``log c(u1, u2) + sum(-Lambda_i + log lambda_i)``
    * only name 1: ``-Lambda_1 + log lambda_1 + log P(U2 > u2(T) | U1 = u1)``
    * only name 2: symmetric
    * none: ``log P(U1 > u1(T), U2 > u2(T))``

    With ``full=False`` the last two regions, on which the bilateral payoff
    vanishes, are flagged ``unused`` and given zero weight.
    """
    _check_horizon(sample, T)
    if len(curves) != 2 or sample.n_names != 2:
        raise ValueError("survivor-free weight needs exactly two names")
    horizon = sample.horizon
    d1, d2 = sample.defaulted
    regions = {"both": d1 & d2, "first": d1 & ~d2, "second": ~d1 & d2, "none": ~d1 & ~d2}
    unused = np.zeros(sample.n_paths, dtype=bool) if full else (regions["second"] | regions["none"])
    t_eff = sample.censored_times()
    s = copula.scale
    r = copula.rho

    def fn(theta):
        c1, c2 = _split(theta, curves)
        lam1 = c1.cumulative_hazard(t_eff[0])
        lam2 = c2.cumulative_hazard(t_eff[1])
        y1 = _scores_from_eps(lam1)
        y2 = _scores_from_eps(lam2)
        dens1 = -lam1 + ad.log(c1.hazard(t_eff[0]))
        dens2 = -lam2 + ad.log(c2.hazard(t_eff[1]))
        w = 0.0
        m = regions["both"]
        if np.any(m):
            w = w + m * (copula.log_density_normal(y1, y2) + dens1 + dens2)
        m = regions["first"]
        if np.any(m):
            # censored name 2 sits at the horizon, so y2 is its horizon score
            w = w + m * (dens1 + ad.log(ad.norm_cdf(-(y2 - r * y1) / s)))
        if full:
            m = regions["second"]
            if np.any(m):
                w = w + m * (dens2 + ad.log(ad.norm_cdf(-(y1 - r * y2) / s)))
            m = regions["none"]
            if np.any(m):
                w = w + m * ad.log(ad.bvn_cdf(-y1, -y2, r))
        return w

    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    out = _evaluate(fn, curves, sample.n_paths, hessian)
    out.unused = unused
    return out


# ---------------------------------------------------------------------------
# payoff decomposition over default patterns


def _subsets(names):
    names = tuple(names)
    for k in range(len(names) + 1):
        for combo in combinations(names, k):
            yield frozenset(combo)


def decompose_payoff(values: Mapping[frozenset, float], names: Sequence[Hashable]) -> dict[frozenset, float]:
    """Addends ``a_I = sum_{J subset I} (-1)^{|I - J|} f_J`` of the default-pattern expansion.

    ``values`` maps each subset of ``names`` (as a frozenset) to the payoff
    evaluated with exactly those names defaulted.  At most three names.
    """
    names = tuple(names)
    if len(names) > 3:
        raise ValueError("decomposition supports at most three names")
    values = {frozenset(k): v for k, v in values.items()}
    for subset in _subsets(names):
        if subset not in values:
            label = "{" + ", ".join(str(n) for n in sorted(subset, key=str)) + "}"
            raise KeyError(f"missing payoff evaluation for subset {label}")
    out = {}
    for subset in _subsets(names):
        acc = 0.0
        for sub in _subsets(sorted(subset, key=str)):
            acc += (-1) ** (len(subset) - len(sub)) * values[sub]
        out[subset] = acc
    return out


def reconstruct_payoff(addends: Mapping[frozenset, float], defaulted: frozenset) -> float:
    """``sum_{I subset defaulted} a_I``: the payoff on the region where exactly ``defaulted`` default."""
    return sum(v for k, v in addends.items() if k <= frozenset(defaulted))
