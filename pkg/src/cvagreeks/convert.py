"""Conversion of model-parameter sensitivities into market-quote sensitivities.

The credit parameters ``theta`` are implied by quotes ``c`` (and possibly
rate quotes ``q``) through residual equations ``b(theta, c, q) = 0``.  Rate
parameters ``psi`` depend on ``q`` only, through a Jacobian ``dpsi/dq``.

Tensor layouts: ``d2b_dtheta2[i, a, b]``, ``d2b_dtheta_dc[i, a, j]``,
``d2b_dc2[i, j, l]`` and likewise for ``q``; model cross gammas are laid out
``[theta, psi]`` and market cross gammas ``[c, q]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .curves import bootstrap_jacobians

__all__ = [
    "CalibrationResiduals", "MarketSensitivities", "HalvingDiagnostic",
    "first_order_implicit", "implicit_adjoint", "first_order_fd_direction",
    "second_order_fd_direction", "market_gamma", "market_cross_gamma", "h_halving_diagnostic",
]


@dataclass
class CalibrationResiduals:
    """Residuals and their derivatives at a calibrated point.

    Derivative fields are arrays evaluated at ``(theta, c, q)``; missing
    ``q`` blocks are treated as zero.
    """

    theta: np.ndarray
    c: np.ndarray
    residual: np.ndarray
    db_dtheta: np.ndarray
    db_dc: np.ndarray
    d2b_dtheta2: np.ndarray | None = None
    d2b_dtheta_dc: np.ndarray | None = None
    d2b_dc2: np.ndarray | None = None
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    db_dq: np.ndarray | None = None
    d2b_dtheta_dq: np.ndarray | None = None
    d2b_dc_dq: np.ndarray | None = None

    def __post_init__(self):
        n, nc, nq = self.theta.size, self.c.size, self.q.size
        if self.db_dtheta.shape != (n, n):
            raise ValueError("db_dtheta must be square in the number of model parameters")
        defaults = {
            "d2b_dtheta2": (n, n, n), "d2b_dtheta_dc": (n, n, nc), "d2b_dc2": (n, nc, nc),
            "db_dq": (n, nq), "d2b_dtheta_dq": (n, n, nq), "d2b_dc_dq": (n, nc, nq),
        }
        for name, shape in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        self._lu = None

    @classmethod
    def bootstrap(cls, theta, c, lgd: float) -> "CalibrationResiduals":
        """The desk case ``b = theta * lgd - c``."""
        theta = np.asarray(theta, dtype=float)
        c = np.asarray(c, dtype=float)
        jac = bootstrap_jacobians(theta.size, lgd)
        return cls(theta, c, theta * lgd - c, jac["db_dtheta"], jac["db_dc"],
                   jac["d2b_dtheta2"], jac["d2b_dtheta_dc"], jac["d2b_dc2"])

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.db_dtheta))

    def check(self, tol: float = 1e-10) -> None:
        if np.max(np.abs(self.residual), initial=0.0) > tol:
            raise ValueError(f"residuals exceed {tol} at the calibrated point")

    def factor(self):
        """LU factorization of ``db/dtheta``, computed once and shared."""
        if self._lu is None:
            cond = self.condition_number
            if not np.isfinite(cond) or cond > 1e14:
                raise np.linalg.LinAlgError(f"db/dtheta is singular (condition number {cond:.3e})")
            self._lu = linalg.lu_factor(self.db_dtheta)
        return self._lu

    def solve(self, rhs, transpose: bool = False):
        return linalg.lu_solve(self.factor(), rhs, trans=1 if transpose else 0)

    def dtheta_dc(self) -> np.ndarray:
        return -self.solve(self.db_dc)

    def dtheta_dq(self) -> np.ndarray:
        if self.q.size == 0:
            return np.zeros((self.theta.size, 0))
        return -self.solve(self.db_dq)


@dataclass
class MarketSensitivities:
    dP_dc: np.ndarray
    dP_dq: np.ndarray | None = None
    d2P_dc2: np.ndarray | None = None
    d2P_dqdc: np.ndarray | None = None


def first_order_implicit(p_theta, residuals: CalibrationResiduals, p_psi=None, dpsi_dq=None) -> MarketSensitivities:
    """``dP/dm = -p_theta (db/dtheta)^{-1} db/dm`` by one transposed solve.

    When ``p_psi`` and ``dpsi_dq`` are given, the direct rate term
    ``p_psi dpsi/dq`` is added to ``dP/dq``.
    """
    p_theta = np.asarray(p_theta, dtype=float)
    lam = residuals.solve(p_theta, transpose=True)
    dP_dc = -lam @ residuals.db_dc
    dP_dq = None
    if residuals.q.size or p_psi is not None:
        dP_dq = -lam @ residuals.db_dq if residuals.q.size else 0.0
        if p_psi is not None:
            dP_dq = dP_dq + np.asarray(p_psi, dtype=float) @ np.asarray(dpsi_dq, dtype=float)
    return MarketSensitivities(dP_dc, dP_dq)


def implicit_adjoint(residuals_at: Callable[[np.ndarray], CalibrationResiduals]):
    """The map ``(v, m) -> -v (db/dtheta)^{-1} db/dc`` at the calibration of ``m``."""

    def alpha_bar(v, m):
        return first_order_implicit(v, residuals_at(np.asarray(m, dtype=float))).dP_dc

    return alpha_bar


def first_order_fd_direction(p_alpha, calib: Callable, m, mu, h: float) -> float:
    """``p_alpha . (alpha(m + h mu) - alpha(m)) / h``."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    m = np.asarray(m, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.dot(p_alpha, (np.asarray(calib(m + h * mu)) - np.asarray(calib(m))) / h))


def second_order_fd_direction(p_alpha, p_alphaalpha, calib: Callable, m, mu, h: float,
                              alpha_bar: Callable) -> np.ndarray:
    """Directional second derivative ``d2P/dm2 . mu`` from one recalibration.

    Uses ``[abar(p_aa (alpha(m+h mu) - alpha(m)) - p_a, m) + abar(p_a, m+h mu)] / h``,
    which is first-order accurate in ``h``.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    m = np.asarray(m, dtype=float)
    mu = np.asarray(mu, dtype=float)
    p_alpha = np.asarray(p_alpha, dtype=float)
    d_alpha = np.asarray(calib(m + h * mu)) - np.asarray(calib(m))
    first = alpha_bar(np.asarray(p_alphaalpha) @ d_alpha - p_alpha, m)
    return (first + alpha_bar(p_alpha, m + h * mu)) / h


def _curvature_columns(p_theta, residuals: CalibrationResiduals, tj: np.ndarray, tl: np.ndarray,
                       b_xy: np.ndarray, b_tx: np.ndarray, b_ty: np.ndarray) -> np.ndarray:
    """``p_theta . d2theta/dx_j dy_l`` for all ``j, l``, one multi-column solve per ``j``."""
    nx, ny = tj.shape[1], tl.shape[1]
    out = np.zeros((nx, ny))
    b_tt = residuals.d2b_dtheta2
    for j in range(nx):
        g = (b_xy[:, j, :]
             + np.einsum("iab,a->ib", b_ty, tj[:, j])
             + np.einsum("ia,al->il", b_tx[:, :, j], tl)
             + np.einsum("iab,a,bl->il", b_tt, tj[:, j], tl))
        out[j] = -np.asarray(p_theta) @ residuals.solve(g)
    return out


def market_gamma(p_theta, p_thetatheta, residuals: CalibrationResiduals) -> np.ndarray:
    """``d2P/dc2 = theta_c^T p_thetatheta theta_c + p_theta . theta_cc`` (symmetrized)."""
    tc = residuals.dtheta_dc()
    main = tc.T @ np.asarray(p_thetatheta, dtype=float) @ tc
    curv = _curvature_columns(p_theta, residuals, tc, tc, residuals.d2b_dc2,
                              residuals.d2b_dtheta_dc, residuals.d2b_dtheta_dc)
    g = main + curv
    return 0.5 * (g + g.T)


def market_cross_gamma(p_theta, p_thetatheta, p_psitheta, residuals: CalibrationResiduals,
                       dpsi_dq) -> np.ndarray:
    """``d2P/dq dc`` laid out ``[c, q]``.

    ``p_psitheta`` is the model cross gamma laid out ``[theta, psi]``.
    Three addends: calibration curvature, the theta-theta term through
    ``dtheta/dq`` and the model cross gamma through ``dpsi/dq``.
    """
    tc = residuals.dtheta_dc()
    dpsi_dq = np.asarray(dpsi_dq, dtype=float)
    out = tc.T @ np.asarray(p_psitheta, dtype=float) @ dpsi_dq
    if residuals.q.size:
        tq = residuals.dtheta_dq()
        out = out + tc.T @ np.asarray(p_thetatheta, dtype=float) @ tq
        out = out + _curvature_columns(p_theta, residuals, tc, tq, residuals.d2b_dc_dq,
                                       residuals.d2b_dtheta_dc, residuals.d2b_dtheta_dq)
    return out


@dataclass
class HalvingDiagnostic:
    """Errors of a finite-difference quantity under repeated halving of ``h``.

    ``ratios[k] = err(h_k) / err(h_{k+1})`` is about 2 for a first-order method.
    """

    steps: np.ndarray
    values: list
    errors: np.ndarray
    ratios: np.ndarray

    @property
    def orders(self) -> np.ndarray:
        return np.log2(self.ratios)


def h_halving_diagnostic(fn: Callable[[float], np.ndarray], h0: float, n: int = 4, reference=None) -> HalvingDiagnostic:
    """Evaluate ``fn`` at ``h0, h0/2, ...``; without ``reference`` successive differences are used."""
    steps = h0 / 2.0 ** np.arange(n)
    values = [np.asarray(fn(h), dtype=float) for h in steps]
    if reference is None:
        errors = np.array([np.max(np.abs(values[k] - values[k + 1])) for k in range(n - 1)])
    else:
        errors = np.array([np.max(np.abs(v - reference)) for v in values])
    ratios = errors[:-1] / errors[1:]
    return HalvingDiagnostic(steps, values, errors, ratios)
