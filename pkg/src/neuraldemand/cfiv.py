"""Control-function first stage: instruments, residuals and relevance diagnostics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PanelDataset
from .regression import add_intercept, ols

__all__ = [
    "F_CAP",
    "FirstStageResult",
    "build_hausman_instruments",
    "first_stage",
    "first_stage_diagnostics",
    "write_diagnostics_csv",
]

log = logging.getLogger(__name__)

F_CAP = 1e12  # reported F when the unrestricted fit is exact


@dataclass
class FirstStageResult:
    coef: np.ndarray  # (k, G): intercept, instruments, controls
    residuals: np.ndarray  # (N, G)
    F: np.ndarray
    r2: np.ndarray
    partial_r2: np.ndarray
    n_excluded: int
    n_controls: int = 0
    goods: tuple = ()
    meta: dict = field(default_factory=dict)

    def residuals_for(self, log_prices, instruments, controls=None) -> np.ndarray:
        """First-stage residuals for new rows using the fitted coefficients."""
        X = _design(instruments, controls)
        return np.asarray(log_prices) - X @ self.coef


def build_hausman_instruments(panel: PanelDataset) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-store-out revenue-weighted mean log price of each good in the same week.

    Returns ``(instruments, valid)``; rows whose week has no other store are
    NaN and marked invalid.
    """
    lp = panel.log_prices
    rev = panel.shares * panel.income[:, None]
    Z = np.full_like(lp, np.nan)
    valid = np.zeros(len(panel), dtype=bool)
    for t in np.unique(panel.time):
        rows = np.flatnonzero(panel.time == t)
        if rows.size < 2:
            continue
        R = rev[rows]
        tot_r = R.sum(axis=0)
        tot_rp = (R * lp[rows]).sum(axis=0)
        den = tot_r - R
        ok = np.all(den > 0, axis=1)
        Z[rows[ok]] = (tot_rp - R * lp[rows])[ok] / den[ok]
        valid[rows[ok]] = True
    dropped = int((~valid).sum())
    if dropped:
        log.info("Hausman instruments undefined for %d rows (single-store weeks)", dropped)
    return Z, valid


def _design(instruments, controls):
    Z = np.asarray(instruments, dtype=float)
    cols = [Z] if controls is None else [Z, np.asarray(controls, dtype=float)]
    return add_intercept(np.column_stack(cols))


def first_stage(
    log_prices: np.ndarray,
    instruments: np.ndarray,
    controls: Optional[np.ndarray] = None,
    goods: Sequence[str] = (),
) -> FirstStageResult:
    """Per-good OLS of ``ln p_g`` on an intercept, every instrument and optional controls.

    Pass log instruments (``ln Z`` in simulations, Hausman log-price means on
    panels).
    """
    lp = np.asarray(log_prices, dtype=float)
    Zi = np.asarray(instruments, dtype=float)
    if Zi.shape[0] != lp.shape[0]:
        raise ValueError("instruments and prices are misaligned")
    X = _design(Zi, controls)
    res = ols(X, lp)
    k_ex = Zi.shape[1]
    n_c = 0 if controls is None else np.asarray(controls).reshape(len(lp), -1).shape[1]
    F, r2, pr2 = first_stage_diagnostics(lp, res.resid, controls, k_ex)
    return FirstStageResult(res.coef, res.resid, F, r2, pr2, k_ex, n_c, tuple(goods))


def first_stage_diagnostics(log_prices, residuals, controls, k_excluded: int):
    """Joint-exclusion F, R^2 and partial R^2 per good.

    The restricted model keeps the intercept and any controls. An exact
    unrestricted fit yields the sentinel ``F_CAP``.
    """
    y = np.asarray(log_prices, dtype=float)
    n = len(y)
    Xr = np.ones((n, 1)) if controls is None else add_intercept(controls)
    k_total = Xr.shape[1] - 1 + k_excluded
    if n <= k_total + 1:
        raise ValueError("need more observations than regressors")
    rss_u = np.sum(np.asarray(residuals) ** 2, axis=0)
    rss_r = ols(Xr, y).rss
    tss = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    df = n - k_total - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        F = ((rss_r - rss_u) / k_excluded) / (rss_u / df)
    F = np.where(rss_u <= 1e-300 * np.maximum(tss, 1.0), F_CAP, np.minimum(F, F_CAP))
    r2 = 1.0 - rss_u / tss
    partial = 1.0 - rss_u / rss_r
    return F, r2, partial


def write_diagnostics_csv(res: FirstStageResult, path) -> None:
    goods = res.goods or tuple(f"good{g}" for g in range(len(res.F)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["good", "F", "R2", "partial_R2"])
        for g, f, r, pr in zip(goods, res.F, res.r2, res.partial_r2):
            w.writerow([g, f"{f:.6f}", f"{r:.6f}", f"{pr:.6f}"])
