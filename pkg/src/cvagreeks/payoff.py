"""CVA integrands, differentiable in the rate parameters and in the default time.

A payoff exposes ``psi0`` (its rate parameters), ``evaluate`` for a batch of
paths and, for single-name payoffs, ``jump_times`` and ``jumps_at`` giving the
discontinuities of ``tau -> f`` used by the distributional estimator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from .credit import DefaultSample
from .hullwhite import HullWhiteModel, RateGrid, SwapSpec, swap_npv

__all__ = ["CvaPayoff", "IndicatorPayoff", "cva_loss"]

MODES = ("unilateral", "bilateral")
DISCOUNTING = ("deterministic", "stochastic")


def cva_loss(lgd: float, discount, npv):
    """``-lgd * discount * max(npv, 0)``; tapable in ``discount`` and ``npv``."""
    return (-lgd) * discount * ad.relu(npv)


def _lane_subset(psi, idx):
    if psi is None or np.ndim(ad.value_of(psi)) < 2:
        return psi
    return psi[:, idx]


@dataclass(frozen=True)
class CvaPayoff:
    """Discounted counterparty loss on a single swap.

    Unilateral: ``f = -lgd D(0, tau) max(NPV_tau, 0) 1{tau <= T}``.
    Bilateral: the indicator becomes ``1{tau_1 <= min(T, tau_2)}``.
    With ``discounting="stochastic"`` the curve discount ``D(0, tau)`` is
    replaced by the path's bank-account discount ``exp(-int_0^tau r)``.
    """

    model: HullWhiteModel
    swap: SwapSpec = SwapSpec()
    lgd: float = 0.6
    mode: str = "unilateral"
    steps_per_year: int = 12
    discounting: str = "deterministic"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.discounting not in DISCOUNTING:
            raise ValueError(f"discounting must be one of {DISCOUNTING}, got {self.discounting!r}")
        if not 0.0 <= self.lgd <= 1.0:
            raise ValueError("lgd must lie in [0, 1]")

    @property
    def horizon(self) -> float:
        return self.swap.maturity

    @property
    def n_names(self) -> int:
        return 1 if self.mode == "unilateral" else 2

    @property
    def needs_rates(self) -> bool:
        return True

    @property
    def psi0(self) -> np.ndarray:
        return np.asarray(self.model.curve.zero_rates, dtype=float)

    @property
    def psi_labels(self) -> tuple:
        return self.model.curve.labels

    @property
    def jump_times(self) -> np.ndarray:
        return self.swap.payment_dates

    def in_loss(self, sample: DefaultSample, tau=None) -> np.ndarray:
        t1 = sample.tau[0] if tau is None else np.asarray(ad.value_of(tau), dtype=float)
        hit = sample.defaulted[0] & (t1 <= self.horizon)
        if self.mode == "bilateral":
            hit &= t1 <= sample.tau[1]
        return hit

    def evaluate(self, sample: DefaultSample, paths: RateGrid, psi=None, tau=None):
        """Per-path payoff; ``psi`` (zero rates) and ``tau`` may be recorded values.

        ``psi`` has shape ``(n_pillars,)`` or ``(n_pillars, n_paths)``;
        ``tau`` overrides the first name's default time.
        """
        n = sample.n_paths
        idx = np.flatnonzero(self.in_loss(sample, tau))
        if idx.size == 0 or self.lgd == 0.0:
            return np.zeros(n)
        t = sample.tau[0, idx] if tau is None else tau[idx]
        curve = self.model.curve if psi is None else self.model.curve.with_rates(_lane_subset(psi, idx))
        sub = paths.subset(idx)
        x_t, integ = sub.state_at(t)
        accrued = integ - self._integral_at_reset(sub, ad.value_of(t), left=False)
        npv = swap_npv(self.model, t, x_t, accrued, self.swap, curve)
        f = cva_loss(self.lgd, self._discount(curve, t, integ), npv)
        return ad.embed(f, idx, n)

    def _discount(self, curve, t, integral):
        d = curve.discount(t)
        if self.discounting == "stochastic":
            d = d * ad.exp(-(integral + self.model.convexity_integral(0.0, t)))
        return d

    def _integral_at_reset(self, paths: RateGrid, tv, left: bool) -> np.ndarray:
        dates = self.swap.payment_dates
        side = "left" if left else "right"
        n_paid = np.searchsorted(dates, tv, side=side)
        reset = np.where(n_paid > 0, dates[np.maximum(n_paid - 1, 0)], 0.0)
        cols = np.searchsorted(paths.times, reset)
        if np.any(paths.times[cols] != reset):
            raise ValueError("payment dates must lie on the simulation grid")
        return paths.integral[np.arange(paths.n_paths), cols]

    def jumps_at(self, sample: DefaultSample, paths: RateGrid) -> np.ndarray:
        """``f(T_i+) - f(T_i-)`` at each payment date, shape ``(n_dates, n_paths)``."""
        if self.mode != "unilateral":
            raise NotImplementedError("payment-date jumps are only defined for the single-name payoff")
        n = paths.n_paths
        out = np.zeros((self.jump_times.size, n))
        if self.lgd == 0.0:
            return out
        prev = 0
        for i, d in enumerate(self.jump_times):
            col = paths.index_of(d)
            x = paths.x[:, col]
            t = np.full(n, d)
            left_acc = paths.integral[:, col] - paths.integral[:, prev]
            before = swap_npv(self.model, t, x, left_acc, self.swap, left_limit=True)
            after = swap_npv(self.model, t, x, np.zeros(n), self.swap)
            disc = self._discount(self.model.curve, t, paths.integral[:, col])
            out[i] = -self.lgd * disc * (np.maximum(after, 0.0) - np.maximum(before, 0.0))
            prev = col
        return out


@dataclass(frozen=True)
class IndicatorPayoff:
    """Toy payoff ``f = psi * 1{tau <= horizon}`` with a single jump at the horizon."""

    horizon: float = 1.0
    psi_value: float = 1.0

    n_names = 1
    needs_rates = False
    mode = "unilateral"
    psi_labels = ("psi",)

    @property
    def psi0(self) -> np.ndarray:
        return np.array([self.psi_value])

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([self.horizon])

    def in_loss(self, sample: DefaultSample, tau=None) -> np.ndarray:
        t1 = sample.tau[0] if tau is None else np.asarray(ad.value_of(tau), dtype=float)
        return sample.defaulted[0] & (t1 <= self.horizon)

    def evaluate(self, sample: DefaultSample, paths=None, psi=None, tau=None):
        hit = self.in_loss(sample, tau).astype(float)
        p = self.psi0 if psi is None else psi
        return p[0] * hit

    def jumps_at(self, sample: DefaultSample, paths=None) -> np.ndarray:
        return np.full((1, sample.n_paths), -self.psi_value)
