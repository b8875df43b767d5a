"""Discount and credit term structures, fixture loading and the credit bootstrap map.

Curve parameters may be replaced by recorded (taped) values so that the
same interpolation code yields path-wise adjoints.  A taped parameter
vector has shape ``(n_pillars, n_lanes)``; a plain one has shape
``(n_pillars,)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import adcore as ad

__all__ = [
    "ZeroCurve", "HazardCurve", "QuoteSet", "load_curve_csv", "fixture_path",
    "spreads_from_hazard", "hazard_from_spreads", "bootstrap_residual", "bootstrap_jacobians",
]


def fixture_path(name: str) -> Path:
    """Path of a shipped fixture (``ESTR.csv`` or ``INDUSTRIAL_Ba.csv``)."""
    return Path(str(resources.files("cvagreeks") / "data" / name))


def load_curve_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a ``pillar,time,zero`` file and return its three columns in file order."""
    path = Path(path)
    labels, times, zeros = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["pillar", "time", "zero"]:
            raise ValueError(f"{path}: row 1: expected header 'pillar,time,zero', got {header!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: row {row_no}: expected 3 fields, got {len(row)}")
            try:
                t = float(row[1])
                z = float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}: row {row_no}: unparsable number ({exc})") from None
            if t <= 0.0:
                raise ValueError(f"{path}: row {row_no}: time must be positive, got {t}")
            if times and t <= times[-1]:
                raise ValueError(f"{path}: row {row_no}: time {t} is not increasing")
            labels.append(row[0].strip())
            times.append(t)
            zeros.append(z)
    if not times:
        raise ValueError(f"{path}: no pillars")
    return labels, np.array(times), np.array(zeros)


def _gather(params, k):
    """Pillar values at index ``k`` (scalar or per-lane), for plain or lane-shaped params."""
    if np.ndim(k) == 0:
        return params[int(k)]
    if params.ndim == 1:
        return params[k]
    return params[k, np.arange(np.shape(k)[0])]


def _check_times(times):
    if times.ndim != 1 or times.size == 0:
        raise ValueError("no pillars")
    if times[0] <= 0.0 or np.any(np.diff(times) <= 0.0):
        raise ValueError("pillar times must be positive and strictly increasing")


@dataclass(frozen=True)
class ZeroCurve:
    """Continuously compounded zero rates, linear between pillars, flat outside."""

    pillar_times: np.ndarray
    zero_rates: object
    labels: tuple = field(default=())

    def __post_init__(self):
        times = np.asarray(self.pillar_times, dtype=float)
        object.__setattr__(self, "pillar_times", times)
        _check_times(times)
        if not isinstance(self.zero_rates, ad.Active):
            rates = np.asarray(self.zero_rates, dtype=float)
            if rates.shape[0] != times.size:
                raise ValueError("zero_rates and pillar_times differ in length")
            object.__setattr__(self, "zero_rates", rates)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"T{i}" for i in range(times.size)))

    @classmethod
    def from_csv(cls, path) -> "ZeroCurve":
        labels, times, zeros = load_curve_csv(path)
        return cls(times, zeros, tuple(labels))

    def with_rates(self, rates) -> "ZeroCurve":
        return replace(self, zero_rates=rates)

    def zero_rate(self, t):
        times = self.pillar_times
        rates = self.zero_rates
        tv = np.asarray(ad.value_of(t), dtype=float)
        if times.size == 1:
            return rates[0] * np.ones(tv.shape)
        k = np.clip(np.searchsorted(times, tv, side="right") - 1, 0, times.size - 2)
        t0 = times[k]
        t1 = times[k + 1]
        a = (t - t0) / (t1 - t0)
        below = tv < times[0]
        above = tv > times[-1]
        if np.any(below) or np.any(above):
            a = ad.where(below, 0.0, ad.where(above, 1.0, a))
        return _gather(rates, k) * (1.0 - a) + _gather(rates, k + 1) * a

    def discount(self, t):
        """``D(0, t) = exp(-r(t) t)``."""
        if np.any(ad.value_of(t) < 0.0):
            raise ValueError("discount: negative time")
        return ad.exp(-(self.zero_rate(t) * t))


@dataclass(frozen=True)
class HazardCurve:
    """Piecewise-constant hazard rates parametrized by zero intensities.

    The cumulative hazard is linear between the nodes ``(0, 0)`` and
    ``(T_j, zero_j * T_j)`` and continues with the last slope beyond the last pillar.
    """

    pillar_times: np.ndarray
    zero_intensities: object
    labels: tuple = field(default=())

    def __post_init__(self):
        times = np.asarray(self.pillar_times, dtype=float)
        object.__setattr__(self, "pillar_times", times)
        _check_times(times)
        if not isinstance(self.zero_intensities, ad.Active):
            lam = np.asarray(self.zero_intensities, dtype=float)
            if lam.shape[0] != times.size:
                raise ValueError("zero_intensities and pillar_times differ in length")
            nodes = lam * times.reshape((-1,) + (1,) * (lam.ndim - 1))
            slopes = np.diff(np.concatenate([np.zeros((1,) + lam.shape[1:]), nodes]), axis=0)
            if np.any(slopes <= 0.0):
                j = int(np.argwhere(slopes <= 0.0)[0][0])
                raise ValueError(f"implied hazard on segment {j} is not positive")
            object.__setattr__(self, "zero_intensities", lam)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"T{i}" for i in range(times.size)))

    @classmethod
    def from_csv(cls, path) -> "HazardCurve":
        labels, times, zeros = load_curve_csv(path)
        return cls(times, zeros, tuple(labels))

    @classmethod
    def flat(cls, intensity: float, horizon: float = 1.0) -> "HazardCurve":
        return cls(np.array([horizon]), np.array([intensity]), ("flat",))

    def with_intensities(self, lam) -> "HazardCurve":
        return replace(self, zero_intensities=lam)

    @property
    def n_pillars(self) -> int:
        return self.pillar_times.size

    def _segment(self, t):
        ext = np.concatenate([[0.0], self.pillar_times])
        k = np.clip(np.searchsorted(ext, ad.value_of(t), side="right") - 1, 0, self.n_pillars - 1)
        lam = self.zero_intensities
        left = _gather(lam, np.maximum(k - 1, 0)) * ext[k]
        right = _gather(lam, k) * ext[k + 1]
        slope = (right - left) / (ext[k + 1] - ext[k])
        return ext[k], left, slope

    def cumulative_hazard(self, t):
        if np.any(ad.value_of(t) < 0.0):
            raise ValueError("cumulative_hazard: negative time")
        t0, left, slope = self._segment(t)
        return left + slope * (t - t0)

    def hazard(self, t):
        """Right-continuous piecewise-constant intensity."""
        if np.any(ad.value_of(t) < 0.0):
            raise ValueError("hazard: negative time")
        return self._segment(t)[2]

    def survival(self, t):
        return ad.exp(-self.cumulative_hazard(t))

    def inverse_cumulative_hazard(self, eps):
        """Time ``t`` with ``Lambda(t) = eps`` (piecewise-linear inversion)."""
        ext = np.concatenate([[0.0], self.pillar_times])
        lam = self.zero_intensities
        lam_v = ad.value_of(lam)
        node_v = lam_v * self.pillar_times.reshape((-1,) + (1,) * (lam_v.ndim - 1))
        eps_v = np.asarray(ad.value_of(eps), dtype=float)
        if lam_v.ndim == 1:
            k = np.searchsorted(node_v, eps_v, side="right")
        else:
            k = (eps_v >= node_v).sum(axis=0)
        k = np.clip(k, 0, self.n_pillars - 1)
        left = _gather(lam, np.maximum(k - 1, 0)) * ext[k]
        right = _gather(lam, k) * ext[k + 1]
        slope = (right - left) / (ext[k + 1] - ext[k])
        return ext[k] + (eps - left) / slope


@dataclass(frozen=True)
class QuoteSet:
    """Market quotes: continuous par CDS spreads, rate quotes and loss given default."""

    credit_quotes: np.ndarray
    rate_quotes: np.ndarray
    lgd: float

    def __post_init__(self):
        c = np.asarray(self.credit_quotes, dtype=float)
        if np.any(c <= 0.0):
            raise ValueError("credit quotes must be positive")
        if not 0.0 < self.lgd <= 1.0:
            raise ValueError("lgd must lie in (0, 1]")
        object.__setattr__(self, "credit_quotes", c)
        object.__setattr__(self, "rate_quotes", np.asarray(self.rate_quotes, dtype=float))


def _check_lgd(lgd):
    if not 0.0 < lgd <= 1.0:
        raise ValueError(f"lgd must lie in (0, 1], got {lgd}")


def spreads_from_hazard(curve: HazardCurve, lgd: float) -> np.ndarray:
    """Continuous par CDS spreads ``zero_intensity * lgd``."""
    _check_lgd(lgd)
    return np.asarray(curve.zero_intensities) * lgd


def hazard_from_spreads(c, times, lgd: float, labels=()) -> HazardCurve:
    _check_lgd(lgd)
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0.0):
        raise ValueError("nonpositive spread")
    return HazardCurve(times, c / lgd, tuple(labels))


def bootstrap_residual(theta, c, lgd: float) -> np.ndarray:
    """Perfect-fit residual ``b = theta * lgd - c``."""
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    if theta.shape != c.shape:
        raise ValueError(f"length mismatch: theta {theta.shape} vs c {c.shape}")
    return theta * lgd - c


def bootstrap_jacobians(n: int, lgd: float) -> dict[str, np.ndarray]:
    """First and second derivatives of :func:`bootstrap_residual` (second ones vanish)."""
    return {
        "db_dtheta": lgd * np.eye(n),
        "db_dc": -np.eye(n),
        "d2b_dtheta2": np.zeros((n, n, n)),
        "d2b_dtheta_dc": np.zeros((n, n, n)),
        "d2b_dc2": np.zeros((n, n, n)),
    }
