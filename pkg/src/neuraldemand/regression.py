"""Least-squares helpers shared by the benchmarks and the control-function first stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SingularDesign", "OLSResult", "ols", "tsls", "add_intercept"]

COND_LIMIT = 1e12


class SingularDesign(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(f"design matrix is numerically singular (condition number {cond:.3g})")
        self.cond = cond


@dataclass
class OLSResult:
    coef: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray
    rss: np.ndarray
    cond: float


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(len(X)), X])


def _check(X):
    if X.shape[0] < X.shape[1]:
        raise SingularDesign(np.inf)
    cond = float(np.linalg.cond(X))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesign(cond)
    return cond


def ols(X: np.ndarray, Y: np.ndarray) -> OLSResult:
    """OLS of each column of ``Y`` on ``X`` (no intercept added)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    cond = _check(X)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    fitted = X @ coef
    resid = Y - fitted
    return OLSResult(coef, resid, fitted, np.sum(resid**2, axis=0), cond)


def tsls(X: np.ndarray, Y: np.ndarray, Z: np.ndarray) -> OLSResult:
    """Two-stage least squares of ``Y`` on ``X`` with instruments ``Z`` (both include any intercept).

    Residuals are structural (``Y - X b``), not second-stage.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.shape[1] < X.shape[1]:
        raise ValueError("fewer instruments than regressors")
    first = ols(Z, X)
    second = ols(first.fitted, Y)
    fitted = X @ second.coef
    resid = np.asarray(Y, dtype=float) - fitted
    return OLSResult(second.coef, resid, fitted, np.sum(resid**2, axis=0), second.cond)
