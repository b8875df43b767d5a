"""Command-line experiment runner.

Builds the trade, curves and models from a flat ``key = value`` config file
(every key can be overridden on the command line), runs the requested
estimators and writes one CSV per run plus an efficiency table.

Sensitivities are reported in market units: credit derivatives per unit of
par spread (``c = lgd * theta``), rate derivatives per unit of zero rate.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .convert import CalibrationResiduals
from .credit import GaussianCopula2
from .curves import HazardCurve, ZeroCurve, fixture_path
from .greeks import EstimatorRun, Setup, run_estimator
from .hullwhite import HullWhiteModel, SwapSpec
from .payoff import CvaPayoff

__all__ = ["ExperimentConfig", "load_config", "build_setup", "run", "report_rows",
           "efficiency_table", "select_pillar", "main", "CSV_HEADER"]

CSV_HEADER = ["coordinate", "pillar_label", "mean", "variance", "half_ci_98", "wall_time_s", "efficiency"]
ESTIMATOR_CHOICES = ("price", "ad", "fd", "cd", "ad2", "fdad", "cdad", "dist")
BUMPED = ("fd", "cd", "fdad", "cdad")


@dataclass
class ExperimentConfig:
    rates_curve: str = "ESTR.csv"
    credit_curve: str = "INDUSTRIAL_Ba.csv"
    own_curve: str = "INDUSTRIAL_Ba.csv"
    lgd: float = 0.6
    notional: float = 1e8
    fixed_rate: float = 0.00947
    maturity_years: int = 10
    receive_fixed: bool = True
    kappa: float = 0.0744
    sigma: float = 0.0125
    steps_per_year: int = 12
    mode: str = "unilateral"
    discounting: str = "deterministic"
    copula_rho: float = 0.0
    weight: str = "auto"
    n_paths: int = 100000
    seed: int = 1
    estimator: tuple = ("price",)
    bump_bp: tuple = (10.0,)
    target: str = "credit"
    workers: int = 1
    block_size: int = 5000
    out_dir: str = "."
    timing: str = "measured"
    credit_slice: str = "10Y"
    rate_slice: str = "10Y"

    def validate(self) -> None:
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not 0.0 < self.lgd <= 1.0:
            raise ValueError("lgd must lie in (0, 1]")
        for e in self.estimator:
            if e not in ESTIMATOR_CHOICES:
                raise ValueError(f"unknown estimator {e!r}; choose from {ESTIMATOR_CHOICES}")
        if any(b <= 0.0 for b in self.bump_bp):
            raise ValueError("bump sizes must be positive")
        if self.mode not in ("unilateral", "bilateral"):
            raise ValueError(f"mode must be unilateral or bilateral, got {self.mode!r}")
        if self.timing not in ("measured", "none"):
            raise ValueError("timing must be 'measured' or 'none'")
        if self.target not in ("credit", "rates", "both"):
            raise ValueError("target must be credit, rates or both")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        for name in self.curve_files():
            if not Path(self.resolve(name)).is_file():
                raise FileNotFoundError(f"curve file not found: {name}")

    def curve_files(self) -> list[str]:
        files = [self.rates_curve, self.credit_curve]
        if self.mode == "bilateral":
            files.append(self.own_curve)
        return files

    @staticmethod
    def resolve(name: str) -> str:
        p = Path(name)
        if p.is_file():
            return str(p)
        shipped = fixture_path(p.name)
        return str(shipped) if p.parent == Path(".") and shipped.is_file() else str(p)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, text: str):
    kind = {f.name: f for f in fields(ExperimentConfig)}[name].type
    if name == "estimator":
        return tuple(s.strip() for s in str(text).split(",") if s.strip())
    if name == "bump_bp":
        return tuple(float(s) for s in str(text).split(",") if s.strip())
    if kind == "bool":
        return _parse_bool(str(text))
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            v = float(text)
            if v != int(v):
                raise ValueError(f"{name}: expected an integer, got {text!r}") from None
            return int(v)
    if kind == "float":
        return float(text)
    return str(text).strip()


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``key = value`` lines (``#`` comments allowed), then apply overrides."""
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    if path is not None:
        for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {line_no}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}: line {line_no}: unknown config key {key!r}")
            values[key] = _coerce(key, val)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val) if isinstance(val, str) else val
    cfg = replace(ExperimentConfig(), **values)
    cfg.validate()
    return cfg


def build_setup(cfg: ExperimentConfig) -> Setup:
    zc = ZeroCurve.from_csv(cfg.resolve(cfg.rates_curve))
    curves = [HazardCurve.from_csv(cfg.resolve(cfg.credit_curve))]
    if cfg.mode == "bilateral":
        curves.append(HazardCurve.from_csv(cfg.resolve(cfg.own_curve)))
    swap = SwapSpec(cfg.notional, cfg.fixed_rate, cfg.maturity_years, cfg.receive_fixed)
    payoff = CvaPayoff(HullWhiteModel(cfg.kappa, cfg.sigma, zc), swap, cfg.lgd, cfg.mode,
                       cfg.steps_per_year, cfg.discounting)
    copula = GaussianCopula2(cfg.copula_rho) if cfg.mode == "bilateral" else None
    weight = cfg.weight
    if weight == "auto":
        weight = "copula" if copula is not None else "censored"
    return Setup(payoff, curves, copula, weight, block_size=cfg.block_size)


# ---------------------------------------------------------------------------
# reporting


def select_pillar(first_order: np.ndarray, labels) -> str:
    """Label of the pillar with the largest absolute first-order sensitivity."""
    return tuple(labels)[int(np.argmax(np.abs(first_order)))]


def credit_quote_scale(setup: Setup) -> float:
    """``dtheta/dc`` of the bootstrap map ``b = theta * lgd - c`` (a multiple of the identity)."""
    lgd = setup.payoff.lgd
    theta = setup.theta0
    jac = CalibrationResiduals.bootstrap(theta, theta * lgd, lgd).dtheta_dc()
    scale = np.diag(jac)
    if not np.allclose(jac, np.diag(scale)) or np.ptp(scale) > 0.0:
        raise ValueError("credit conversion is expected to be a uniform diagonal scaling")
    return float(scale[0])


_OUTPUT_NAMES = {"price": "price", "theta": "credit_delta", "psi": "rate_delta",
                 "cross": "cross_gamma", "gamma": "credit_gamma"}
_CREDIT_AXES = {"price": 0, "theta": 1, "psi": 0, "cross": 1, "gamma": 2}
_SUFFIX = {"": "", "sum": "_parallel", "rowsum": "_rowsum", "colsum": "_colsum"}


def _flat(labels: tuple, shape) -> list[str]:
    if len(labels) == 0:
        return ["all"]
    if len(labels) == 1:
        return list(labels[0])
    return [f"{a}|{b}" for a in labels[0] for b in labels[1]]


def report_rows(run: EstimatorRun, setup: Setup, timing: str = "measured",
                credit_slice: str = "10Y", rate_slice: str = "10Y") -> list[list]:
    """Rows of the per-run CSV in market units."""
    wall = run.wall_time if timing == "measured" else math.nan
    rows = []

    def emit(coord, labels, mean, var):
        mean = np.atleast_1d(mean).ravel()
        var = np.atleast_1d(var).ravel()
        for lab, m, v in zip(labels, mean, var):
            half = 2.3263478740408408 * math.sqrt(v / run.n_paths) if np.isfinite(v) else math.nan
            eff = wall * v / run.n_paths
            rows.append([coord, lab, float(m), float(v), half, wall, eff])

    for name in run.names():
        base, _, agg = name.partition(":")
        coord = _OUTPUT_NAMES[base] + _SUFFIX[agg]
        s = credit_quote_scale(setup) ** _CREDIT_AXES[base]
        mean = run.mean(name) * s
        var = run.variance(name) * np.square(s)
        emit(coord, _flat(run.labels[name], np.shape(mean)), mean, var)
        if base in ("cross", "gamma") and agg == "":
            col_labels = run.labels[name][1]
            pick = rate_slice if base == "cross" else credit_slice
            if pick in col_labels:
                j = col_labels.index(pick)
                emit(f"{_OUTPUT_NAMES[base]}_slice_{pick}", list(run.labels[name][0]), mean[:, j], var[:, j])
    return rows


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return format(float(x), ".16e")


def write_csv(path: Path, rows: list[list], header=CSV_HEADER) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def efficiency_table(reports: dict[str, list[list]]) -> list[list]:
    """Rows ``(run, coordinate, pillar_label, efficiency, log10_efficiency)``."""
    out = []
    for run_name, rows in reports.items():
        for r in rows:
            eff = r[6]
            lg = math.log10(eff) if eff > 0 and np.isfinite(eff) else math.nan
            out.append([run_name, r[0], r[1], eff, lg])
    return out


def _run_name(est: str, bp: float | None) -> str:
    if bp is None:
        return est
    return f"{est}_{format(bp, 'g')}bp"


def run(cfg: ExperimentConfig) -> dict[str, Path]:
    """Run every requested estimator and write the CSV reports; returns the files written."""
    cfg.validate()
    setup = build_setup(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lgd = cfg.lgd
    credit_slice, rate_slice = cfg.credit_slice, cfg.rate_slice
    if "auto" in (credit_slice, rate_slice):
        probe = run_estimator(setup, "ad", min(cfg.n_paths, 20000), cfg.seed, cfg.workers)
        if credit_slice == "auto":
            credit_slice = select_pillar(probe.mean("theta"), setup.theta_labels)
        if rate_slice == "auto":
            rate_slice = select_pillar(probe.mean("psi"), setup.psi_labels)
    written, reports = {}, {}
    for est in cfg.estimator:
        bumps = cfg.bump_bp if est in BUMPED else (None,)
        targets = ("credit", "rates") if (est in ("fd", "cd") and cfg.target == "both") else (cfg.target,)
        for bp in bumps:
            for target in targets:
                opts = {}
                if bp is not None:
                    if est in ("fd", "cd") and target == "rates":
                        opts = {"bump": bp * 1e-4, "target": "rates"}
                    else:
                        opts = {"bump": bp * 1e-4 / lgd, "target": "credit"}
                res = run_estimator(setup, est, cfg.n_paths, cfg.seed, cfg.workers, **opts)
                name = _run_name(est, bp) + ("_rates" if target == "rates" and est in ("fd", "cd") else "")
                rows = report_rows(res, setup, cfg.timing, credit_slice, rate_slice)
                path = out_dir / f"{name}.csv"
                write_csv(path, rows)
                written[name] = path
                reports[name] = rows
    eff_path = out_dir / "efficiency.csv"
    write_csv(eff_path, efficiency_table(reports),
              header=["run", "coordinate", "pillar_label", "efficiency", "log10_efficiency"])
    written["efficiency"] = eff_path
    return written


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvagreeks", description="CVA and CVA sensitivity experiments")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--estimator", help=f"comma-separated subset of {','.join(ESTIMATOR_CHOICES)}")
    p.add_argument("--bump-bp", dest="bump_bp", help="comma-separated bump sizes in basis points")
    p.add_argument("--paths", dest="n_paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--timing", choices=("measured", "none"),
                   help="'none' writes NaN timings so reruns are byte-identical")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("estimator", "bump_bp", "n_paths", "seed", "workers", "out_dir", "timing"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val if isinstance(val, str) else val
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    files = run(cfg)
    for name, path in files.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
