"""One-factor Hull-White model fitted to a zero curve, path simulation and swap valuation.

The short rate is ``r(t) = x(t) + phi(t)`` with ``dx = -kappa x dt + sigma dW``,
``x(0) = 0``; ``phi`` is fixed by the initial curve, so bond prices at time 0
reproduce ``D(0, .)`` for any curve.  The curve's zero rates are the only
rate parameters that are differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from .curves import ZeroCurve

__all__ = ["SwapSpec", "HullWhiteModel", "RateGrid", "make_grid", "simulate_paths", "swap_npv"]


@dataclass(frozen=True)
class SwapSpec:
    """Fixed-vs-compounded-overnight swap with regular periods starting today."""

    notional: float = 1e8
    fixed_rate: float = 0.00947
    maturity_years: int = 10
    receive_fixed: bool = True
    period: float = 1.0

    @property
    def payment_dates(self) -> np.ndarray:
        n = int(round(self.maturity_years / self.period))
        return self.period * np.arange(1, n + 1, dtype=float)

    @property
    def maturity(self) -> float:
        return float(self.payment_dates[-1])


@dataclass(frozen=True)
class HullWhiteModel:
    kappa: float
    sigma: float
    curve: ZeroCurve

    def __post_init__(self):
        if self.kappa <= 0.0 or self.sigma < 0.0:
            raise ValueError("kappa must be positive and sigma non-negative")

    def B(self, t, T):
        return (1.0 - ad.exp(-self.kappa * (T - t))) / self.kappa

    def V(self, t, T):
        """Variance of the integral of ``x`` over ``[t, T]``."""
        k = self.kappa
        dt = T - t
        return (self.sigma ** 2 / k ** 2) * (
            dt + (2.0 / k) * ad.exp(-k * dt) - (0.5 / k) * ad.exp(-2.0 * k * dt) - 1.5 / k)

    def convexity_integral(self, a, b):
        """Integral over ``[a, b]`` of ``sigma^2 / (2 kappa^2) (1 - exp(-kappa s))^2``."""
        k = self.kappa
        return (self.sigma ** 2 / (2.0 * k ** 2)) * (
            (b - a) - (2.0 / k) * (ad.exp(-k * a) - ad.exp(-k * b))
            + (0.5 / k) * (ad.exp(-2.0 * k * a) - ad.exp(-2.0 * k * b)))

    def bond_price(self, t, T, x, curve: ZeroCurve | None = None):
        """Zero-coupon bond ``P(t, T) = A(t, T) exp(-B(t, T) x_t)``."""
        if np.any(ad.value_of(t) > ad.value_of(T)):
            raise ValueError("bond_price: t > T")
        curve = self.curve if curve is None else curve
        a = curve.discount(T) / curve.discount(t) * ad.exp(
            0.5 * (self.V(t, T) - self.V(0.0, T) + self.V(0.0, t)))
        return a * ad.exp(-(self.B(t, T) * x))


def make_grid(payment_dates, steps_per_year: int = 12) -> np.ndarray:
    """Uniform-per-period grid from 0 that contains every payment date exactly once."""
    pts = [np.array([0.0])]
    start = 0.0
    for end in np.asarray(payment_dates, dtype=float):
        n = max(1, int(np.ceil(steps_per_year * (end - start) - 1e-9)))
        pts.append(np.linspace(start, end, n + 1)[1:])
        start = end
    return np.concatenate(pts)


@dataclass
class RateGrid:
    """Simulated factor values at grid times, one row per path.

    ``integral`` holds the running integral of the factor from time 0, taken
    along the conditional-mean (bridge) interpolant between grid points.
    """

    times: np.ndarray
    x: np.ndarray
    integral: np.ndarray
    kappa: float

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "RateGrid":
        return RateGrid(self.times, self.x[idx], self.integral[idx], self.kappa)

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= self.times.size or self.times[i] != t:
            raise ValueError(f"time {t} is not a grid point")
        return i

    def state_at(self, t):
        """Bridge-mean factor and running integral at per-path times ``t`` (may be taped)."""
        tv = np.asarray(ad.value_of(t), dtype=float)
        times = self.times
        m = np.clip(np.searchsorted(times, tv, side="right") - 1, 0, times.size - 2)
        rows = np.arange(self.n_paths)
        x0 = self.x[rows, m]
        x1 = self.x[rows, m + 1]
        k = self.kappa
        dt = times[m + 1] - times[m]
        sinh_dt = np.sinh(k * dt)
        gap = x1 - x0 * np.exp(-k * dt)
        a = t - times[m]
        e_minus = ad.exp(-k * a)
        e_plus = ad.exp(k * a)
        x_t = x0 * e_minus + (0.5 * (e_plus - e_minus)) * (gap / sinh_dt)
        partial = x0 * ((1.0 - e_minus) / k) + (0.5 * (e_plus + e_minus) - 1.0) * (gap / (k * sinh_dt))
        return x_t, self.integral[rows, m] + partial


def _interval_integral(x0, x1, kappa, dt):
    gap = x1 - x0 * np.exp(-kappa * dt)
    return x0 * (1.0 - np.exp(-kappa * dt)) / kappa + (np.cosh(kappa * dt) - 1.0) / (kappa * np.sinh(kappa * dt)) * gap


def simulate_paths(model: HullWhiteModel, grid_times, n_paths: int, rng) -> RateGrid:
    """Exact Ornstein-Uhlenbeck transitions on ``grid_times``.

    ``rng`` is a numpy Generator or an array of standard normals of shape
    ``(n_paths, len(grid_times) - 1)``.
    """
    times = np.asarray(grid_times, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0.0):
        raise ValueError("grid must start at 0 and increase")
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    steps = times.size - 1
    if isinstance(rng, np.random.Generator):
        z = rng.standard_normal((n_paths, steps))
    else:
        z = np.asarray(rng, dtype=float).reshape(n_paths, steps)
    k, s = model.kappa, model.sigma
    dt = np.diff(times)
    decay = np.exp(-k * dt)
    sd = s * np.sqrt(-np.expm1(-2.0 * k * dt) / (2.0 * k))
    x = np.zeros((n_paths, steps + 1))
    integ = np.zeros((n_paths, steps + 1))
    for i in range(steps):
        x[:, i + 1] = x[:, i] * decay[i] + sd[i] * z[:, i]
        integ[:, i + 1] = integ[:, i] + _interval_integral(x[:, i], x[:, i + 1], k, dt[i])
    return RateGrid(times, x, integ, k)


def swap_npv(model: HullWhiteModel, t, x_t, accrued, swap: SwapSpec,
             curve: ZeroCurve | None = None, left_limit: bool = False):
    """Value at ``t`` of the remaining swap flows.

    ``accrued`` is the integral of the factor since the last payment date.
    By default a flow paid at ``t`` is excluded (right limit); with
    ``left_limit=True`` it is still included.
    """
    curve = model.curve if curve is None else curve
    tv = np.asarray(ad.value_of(t), dtype=float)
    dates = swap.payment_dates
    if np.any(tv > dates[-1]) or np.any(tv < 0.0):
        raise ValueError("swap_npv: time outside [0, maturity]")
    if left_limit:
        remaining = [tv <= d for d in dates]
        n_paid = np.searchsorted(dates, tv, side="left")
    else:
        remaining = [tv < d for d in dates]
        n_paid = np.searchsorted(dates, tv, side="right")
    reset = np.where(n_paid > 0, dates[np.maximum(n_paid - 1, 0)], 0.0)
    alive = remaining[-1].astype(float)

    fixed = 0.0
    for d, mask in zip(dates, remaining):
        if np.any(mask):
            fixed = fixed + (swap.period * mask) * model.bond_price(ad.where(mask, t, 0.0), d, x_t, curve)
    t_safe = ad.where(remaining[-1], t, 0.0)
    growth = ad.exp(accrued + model.convexity_integral(reset, t_safe)) * (curve.discount(reset) / curve.discount(t_safe))
    floating = growth - model.bond_price(t_safe, dates[-1], x_t, curve)
    sign = 1.0 if swap.receive_fixed else -1.0
    return (sign * swap.notional) * alive * (swap.fixed_rate * fixed - floating)
