"""Monte Carlo estimators of the CVA and of its first and second order sensitivities.

Paths are processed in fixed-size blocks.  Every block draws from its own
counter-based Philox streams keyed by ``(seed, block, stream)``, so the
draws, and therefore the per-path contributions, do not depend on how
blocks are spread over worker processes.  Block results are reduced in
block order.

Credit parameters ``theta`` are the zero intensities of every name
(concatenated); rate parameters ``psi`` are the payoff's zero rates.
Bumps passed to the finite-difference estimators are in ``theta`` (or
``psi``) units.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import adcore as ad
from .credit import (CreditWeight, DefaultSample, GaussianCopula2, sample_default_normals,
                     sample_default_pair, weight_independent, weight_pair_copula,
                     weight_pair_survivor_free)
from .curves import HazardCurve
from .hullwhite import RateGrid, make_grid, simulate_paths

__all__ = [
    "Setup", "Moments", "EstimatorRun", "ESTIMATORS", "run_estimator",
    "price", "delta_conditional", "delta_distributional", "cross_gamma", "credit_gamma",
    "second_order", "fd_delta", "cd_delta", "fdad_gamma", "cdad_gamma", "block_generator",
    "difference_rows",
]

RATES_STREAM = 0
CREDIT_STREAM = 1
Z_98 = 2.3263478740408408
WEIGHTS = ("censored", "copula", "survivor_free")


def block_generator(seed: int, block: int, stream: int) -> np.random.Generator:
    """Independent Philox stream for one block of paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block, stream])))


@dataclass(frozen=True)
class Setup:
    """Everything an estimator needs apart from path count and seed."""

    payoff: object
    curves: tuple
    copula: GaussianCopula2 | None = None
    weight: str = "censored"
    horizon: float | None = None
    block_size: int = 5000
    store_cap: int = 20_000_000

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        if len(self.curves) != self.payoff.n_names:
            raise ValueError(f"payoff needs {self.payoff.n_names} credit curve(s), got {len(self.curves)}")
        if self.weight not in WEIGHTS:
            raise ValueError(f"weight must be one of {WEIGHTS}")
        if self.weight != "censored" and (self.copula is None or len(self.curves) != 2):
            raise ValueError(f"the {self.weight!r} weight needs two names and a copula")
        if self.copula is not None and len(self.curves) != 2:
            raise ValueError("a Gaussian copula is supported for exactly two names")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    @property
    def T(self) -> float:
        return float(self.payoff.horizon if self.horizon is None else self.horizon)

    @property
    def theta0(self) -> np.ndarray:
        return np.concatenate([np.asarray(c.zero_intensities, dtype=float) for c in self.curves])

    @property
    def theta_labels(self) -> tuple:
        if len(self.curves) == 1:
            return tuple(self.curves[0].labels)
        return tuple(f"n{i + 1}:{lab}" for i, c in enumerate(self.curves) for lab in c.labels)

    @property
    def psi_labels(self) -> tuple:
        return tuple(self.payoff.psi_labels)

    @property
    def grid(self) -> np.ndarray | None:
        if not self.payoff.needs_rates:
            return None
        return make_grid(self.payoff.swap.payment_dates, self.payoff.steps_per_year)

    def curves_at(self, theta) -> list[HazardCurve]:
        out, start = [], 0
        for c in self.curves:
            k = c.n_pillars
            out.append(c.with_intensities(np.asarray(theta[start:start + k], dtype=float)))
            start += k
        return out

    def sample(self, theta, z) -> DefaultSample:
        curves = self.curves_at(theta)
        if self.copula is not None:
            return sample_default_pair(curves, self.T, self.copula, z[0], z[1])
        return sample_default_normals(curves, self.T, z)

    def weight_of(self, sample: DefaultSample, theta, hessian: bool = False) -> CreditWeight:
        curves = self.curves_at(theta)
        if self.weight == "copula":
            return weight_pair_copula(curves, sample, self.copula, hessian=hessian)
        if self.weight == "survivor_free":
            return weight_pair_survivor_free(curves, sample, self.copula, hessian=hessian)
        return weight_independent(curves, sample, hessian=hessian)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Moments:
    """Count, mean and sum of squared deviations, combinable across blocks."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray) -> "Moments":
        mean = values.mean(axis=-1)
        dev = values - mean[..., None]
        return cls(values.shape[-1], mean, np.einsum("...i,...i->...", dev, dev))

    def combine(self, other: "Moments") -> "Moments":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1) if self.n > 1 else np.full(np.shape(self.mean), np.nan)


@dataclass
class EstimatorRun:
    """Statistics of one estimator run.

    ``variance`` is the per-path sample variance; the variance of the
    estimate is ``variance / n_paths``.  ``per_path`` holds the
    contributions (last axis = path) when they fit under the storage cap.
    """

    estimator: str
    n_paths: int
    seed: int
    wall_time: float
    moments: dict[str, Moments]
    labels: dict[str, tuple]
    per_path: dict[str, np.ndarray] | None = None
    draws: dict[str, int] = field(default_factory=dict)
    bump: float | None = None

    def names(self) -> list[str]:
        return list(self.moments)

    def mean(self, name: str) -> np.ndarray:
        if self.per_path is not None:
            return np.mean(self.per_path[name], axis=-1)
        return self.moments[name].mean

    def variance(self, name: str) -> np.ndarray:
        if self.per_path is not None:
            return np.var(self.per_path[name], axis=-1, ddof=1)
        return self.moments[name].variance

    def stderr(self, name: str) -> np.ndarray:
        return np.sqrt(self.variance(name) / self.n_paths)

    def half_ci(self, name: str) -> np.ndarray:
        return Z_98 * self.stderr(name)

    def efficiency(self, name: str) -> np.ndarray:
        """Wall time times the variance of the estimate (lower is better)."""
        return self.wall_time * self.variance(name) / self.n_paths


# ---------------------------------------------------------------------------
# block context


@dataclass
class _Block:
    index: int
    n: int
    rates_z: np.ndarray | None
    credit_z: np.ndarray
    paths: RateGrid | None

    @property
    def draws(self) -> dict[str, int]:
        return {"rates": 0 if self.rates_z is None else self.rates_z.size, "credit": self.credit_z.size}


def _make_block(setup: Setup, seed: int, index: int, n: int) -> _Block:
    grid = setup.grid
    rates_z = paths = None
    if grid is not None:
        rates_z = block_generator(seed, index, RATES_STREAM).standard_normal((n, grid.size - 1))
        paths = simulate_paths(setup.payoff.model, grid, n, rates_z)
    credit_z = block_generator(seed, index, CREDIT_STREAM).standard_normal((len(setup.curves), n))
    return _Block(index, n, rates_z, credit_z, paths)


def _lanes(x: np.ndarray, n: int) -> np.ndarray:
    return np.repeat(np.asarray(x, dtype=float)[:, None], n, axis=1)


def _payoff_psi(setup: Setup, sample: DefaultSample, blk: _Block):
    """Payoff and its path-wise rate gradient (one reverse sweep)."""
    psi = _lanes(setup.payoff.psi0, blk.n)
    rec = ad.record(lambda psi: setup.payoff.evaluate(sample, blk.paths, psi=psi), psi=psi)
    return np.asarray(rec.value, dtype=float), ad.gradient(rec)["psi"]


def _conditional_parts(setup: Setup, blk: _Block, theta, hessian=False):
    sample = setup.sample(theta, blk.credit_z)
    f, g_psi = _payoff_psi(setup, sample, blk)
    w = setup.weight_of(sample, theta, hessian)
    return f, g_psi, w


# ---------------------------------------------------------------------------
# block estimators: each returns {output name: array (..., n_block)}


def _blk_price(setup, blk, opts):
    sample = setup.sample(setup.theta0, blk.credit_z)
    return {"price": np.asarray(setup.payoff.evaluate(sample, blk.paths), dtype=float)}


def _blk_conditional(setup, blk, opts):
    f, g_psi, w = _conditional_parts(setup, blk, setup.theta0)
    return {"price": f, "theta": f * w.grad, "psi": g_psi}


def _blk_second(setup, blk, opts):
    want = opts.get("outputs", ("cross", "gamma"))
    f, g_psi, w = _conditional_parts(setup, blk, setup.theta0, hessian="gamma" in want)
    out = {"price": f, "theta": f * w.grad, "psi": g_psi}
    if "cross" in want:
        out["cross"] = w.grad[:, None, :] * g_psi[None, :, :]
    if "gamma" in want:
        out["gamma"] = f * (w.hess + w.grad[:, None, :] * w.grad[None, :, :])
    return out


def _blk_distributional(setup, blk, opts):
    payoff = setup.payoff
    if len(setup.curves) != 1 or getattr(payoff, "mode", "unilateral") != "unilateral":
        raise NotImplementedError("the distributional estimator is single-name only")
    curve = setup.curves[0]
    sample = setup.sample(setup.theta0, blk.credit_z)
    eps = sample.eps[0]

    def smooth(theta):
        tau = curve.with_intensities(theta).inverse_cumulative_hazard(eps)
        return payoff.evaluate(sample, blk.paths, tau=tau)

    rec = ad.record(smooth, theta=_lanes(setup.theta0, blk.n))
    grad = ad.gradient(rec)["theta"]
    jumps = payoff.jumps_at(sample, blk.paths)
    for i, t in enumerate(payoff.jump_times):
        lam = ad.record(lambda theta: curve.with_intensities(theta).cumulative_hazard(t), theta=setup.theta0)
        dlam = ad.gradient(lam)["theta"]
        grad = grad - (np.exp(-lam.value) * jumps[i])[None, :] * dlam[:, None]
    return {"price": np.asarray(rec.value, dtype=float), "theta": grad}


def difference_rows(fn, x0, h: float, central: bool, base=None):
    """Finite differences of ``fn`` along each coordinate of ``x0``.

    ``fn`` returns an array (or a tuple of arrays); row ``j`` of each output
    is ``(fn(x + h e_j) - fn(x - h e_j)) / 2h`` or ``(fn(x + h e_j) - fn(x)) / h``.
    """
    x0 = np.asarray(x0, dtype=float)

    def at(j, step):
        x = x0.copy()
        x[j] += step
        out = fn(x)
        return out if isinstance(out, tuple) else (out,)

    if not central and base is None:
        base = fn(x0)
    base_t = base if isinstance(base, tuple) else (base,)
    rows = [[] for _ in base_t] if base is not None else None
    for j in range(x0.size):
        up = at(j, h)
        if rows is None:
            rows = [[] for _ in up]
        if central:
            down = at(j, -h)
            diffs = [(u - d) / (2.0 * h) for u, d in zip(up, down)]
        else:
            diffs = [(u - b0) / h for u, b0 in zip(up, base_t)]
        for r, d in zip(rows, diffs):
            r.append(d)
    stacked = tuple(np.stack(r) for r in rows)
    return stacked if len(stacked) > 1 else stacked[0]


def _price_at(setup, blk, theta, psi=None):
    sample = setup.sample(theta, blk.credit_z)
    return np.asarray(setup.payoff.evaluate(sample, blk.paths, psi=psi), dtype=float)


def _blk_fd(setup, blk, opts):
    h, central, target = opts["bump"], opts["central"], opts.get("target", "credit")
    theta0, psi0 = setup.theta0, setup.payoff.psi0
    base = None if central else _price_at(setup, blk, theta0)
    if target == "credit":
        rows = difference_rows(lambda x: _price_at(setup, blk, x), theta0, h, central, base)
        res = {"theta": rows}
    elif target == "rates":
        rows = difference_rows(lambda x: _price_at(setup, blk, theta0, psi=x), psi0, h, central, base)
        res = {"psi": rows}
    else:
        raise ValueError(f"unknown bump target {target!r}")
    if base is not None:
        res["price"] = base
    return res


def _blk_fdad(setup, blk, opts):
    def ad_delta(theta):
        f, g_psi, w = _conditional_parts(setup, blk, theta)
        return f * w.grad, g_psi

    gamma, cross = difference_rows(ad_delta, setup.theta0, opts["bump"], opts["central"])
    return {"gamma": gamma, "cross": cross}


ESTIMATORS = {
    "price": _blk_price,
    "ad": _blk_conditional,
    "ad2": _blk_second,
    "dist": _blk_distributional,
    "fd": _blk_fd,
    "cd": _blk_fd,
    "fdad": _blk_fdad,
    "cdad": _blk_fdad,
}


def _with_aggregates(values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Adds parallel-shift sums: ``name:sum`` for vectors, row/column sums for matrices."""
    out = dict(values)
    for name, v in values.items():
        if v.ndim == 2:
            out[f"{name}:sum"] = v.sum(axis=0)
        elif v.ndim == 3:
            out[f"{name}:rowsum"] = v.sum(axis=1)
            out[f"{name}:colsum"] = v.sum(axis=0)
            out[f"{name}:sum"] = v.sum(axis=(0, 1))
    return out


def _run_block(args):
    setup, kind, opts, seed, index, n = args
    blk = _make_block(setup, seed, index, n)
    values = _with_aggregates(ESTIMATORS[kind](setup, blk, opts))
    return values, blk.draws


def _labels(setup: Setup, name: str) -> tuple:
    th, ps = setup.theta_labels, setup.psi_labels
    base, _, agg = name.partition(":")
    axes = {"price": (), "theta": (th,), "psi": (ps,), "cross": (th, ps), "gamma": (th, th)}[base]
    if agg == "sum":
        return ()
    if agg == "rowsum":
        return axes[:1]
    if agg == "colsum":
        return axes[1:]
    return axes


def run_estimator(setup: Setup, kind: str, n_paths: int, seed: int, workers: int = 1,
                  **opts) -> EstimatorRun:
    """Run estimator ``kind`` on ``n_paths`` paths.

    ``opts`` carries ``bump`` (for fd/cd/fdad/cdad), ``target`` (credit or
    rates, for fd/cd) and ``outputs`` (for ad2).
    """
    if kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator {kind!r}; choose from {sorted(ESTIMATORS)}")
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if kind in ("fd", "cd", "fdad", "cdad"):
        if opts.get("bump", 0.0) <= 0.0:
            raise ValueError("bump must be positive")
        opts["central"] = kind in ("cd", "cdad")
    bs = setup.block_size
    blocks = [(setup, kind, opts, seed, b, min(bs, n_paths - b * bs)) for b in range(-(-n_paths // bs))]

    start = time.perf_counter()
    moments: dict[str, Moments] = {}
    stored: dict[str, list] | None = None
    draws = {"rates": 0, "credit": 0}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 and len(blocks) > 1 else None
    try:
        results = pool.map(_run_block, blocks) if pool is not None else map(_run_block, blocks)
        for values, d in results:
            if stored is None and not moments:
                per_path = sum(int(np.prod(v.shape[:-1])) for v in values.values())
                stored = {name: [] for name in values} if per_path * n_paths <= setup.store_cap else None
            for name, v in values.items():
                m = Moments.of(v)
                moments[name] = m if name not in moments else moments[name].combine(m)
                if stored is not None:
                    stored[name].append(v)
            for key in draws:
                draws[key] += d[key]
    finally:
        if pool is not None:
            pool.shutdown()
    store = None if stored is None else {name: np.concatenate(v, axis=-1) for name, v in stored.items()}
    wall = time.perf_counter() - start

    labels = {name: _labels(setup, name) for name in moments}
    return EstimatorRun(kind, n_paths, seed, wall, moments, labels, store, draws, opts.get("bump"))


# ---------------------------------------------------------------------------
# named entry points


def price(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "price", n_paths, seed, workers)


def delta_conditional(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    """Per path ``df/dpsi`` and ``f dw/dtheta``."""
    return run_estimator(setup, "ad", n_paths, seed, workers)


def delta_distributional(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    """Path-wise derivative through ``tau(theta)`` plus payment-date jump corrections."""
    return run_estimator(setup, "dist", n_paths, seed, workers)


def cross_gamma(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    """Per path ``outer(dw/dtheta, df/dpsi)``, laid out ``[theta, psi]``."""
    return run_estimator(setup, "ad2", n_paths, seed, workers, outputs=("cross",))


def credit_gamma(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    """Per path ``f (d2w/dtheta2 + outer(dw/dtheta, dw/dtheta))``."""
    return run_estimator(setup, "ad2", n_paths, seed, workers, outputs=("gamma",))


def second_order(setup: Setup, n_paths: int, seed: int, workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "ad2", n_paths, seed, workers, outputs=("cross", "gamma"))


def fd_delta(setup: Setup, n_paths: int, seed: int, bump: float, target: str = "credit",
             workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "fd", n_paths, seed, workers, bump=bump, target=target)


def cd_delta(setup: Setup, n_paths: int, seed: int, bump: float, target: str = "credit",
             workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "cd", n_paths, seed, workers, bump=bump, target=target)


def fdad_gamma(setup: Setup, n_paths: int, seed: int, bump: float, workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "fdad", n_paths, seed, workers, bump=bump)


def cdad_gamma(setup: Setup, n_paths: int, seed: int, bump: float, workers: int = 1) -> EstimatorRun:
    return run_estimator(setup, "cdad", n_paths, seed, workers, bump=bump)
