"""Fit metrics, finite-difference elasticities and Slutsky matrices, welfare and regularity checks.

Every estimator in the package exposes ``predict(prices, income, state=None)``
returning an ``(N, G)`` array of budget shares, where ``state`` carries any
extra inputs (habit stocks, lag windows) the model conditions on. The
functions here only rely on that method.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

__all__ = [
    "ConstantShareModel",
    "ElasticityMatrix",
    "OracleModel",
    "RegularityReport",
    "ShareModel",
    "SlutskyMatrix",
    "compensating_variation",
    "elasticity_matrix_fd",
    "fit_metrics",
    "lambda_max_3x3",
    "regularity_dashboard",
    "slutsky_at",
    "write_elasticity_csv",
]

KL_FLOOR = 1e-10


class ShareModel(Protocol):
    def predict(self, prices: np.ndarray, income: np.ndarray, state: Optional[np.ndarray] = None) -> np.ndarray: ...


class OracleModel:
    """Wrap a DGP so its closed-form shares can be fed to the metric code."""

    def __init__(self, kind):
        self.kind = kind

    def predict(self, prices, income, state=None):
        from .dgp import HabitCES

        if isinstance(self.kind, HabitCES):
            return self.kind.shares(prices, income, state, allow_deficit=True)
        return self.kind.shares(prices, income)


class ConstantShareModel:
    def __init__(self, shares):
        self.w = np.asarray(shares, dtype=float)

    def predict(self, prices, income, state=None):
        return np.broadcast_to(self.w, np.shape(prices)).copy()


def fit_metrics(predicted, observed) -> tuple[float, float, float]:
    """Pooled RMSE, MAE and mean per-observation KL(observed || predicted)."""
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {o.shape}")
    err = p - o
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    of = np.maximum(o, KL_FLOOR)
    pf = np.maximum(p, KL_FLOOR)
    kl = float(np.mean(np.sum(o * (np.log(of) - np.log(pf)), axis=-1)))
    return rmse, mae, kl


def _broadcast_point(prices, income, state):
    p = np.atleast_2d(np.asarray(prices, dtype=float))
    y = np.broadcast_to(np.asarray(income, dtype=float), p.shape[:1]).astype(float)
    s = None if state is None else np.broadcast_to(np.asarray(state, dtype=float), (p.shape[0], np.shape(state)[-1]))
    if np.any(p <= 0) or np.any(y <= 0):
        raise ValueError("prices and income must be strictly positive")
    return p, y, s


def _log_derivatives(model, p, y, s, h, with_income):
    """Central differences of shares w.r.t. ln p_j (and ln y) in one stacked predict call.

    Returns ``(w, dW)`` with ``dW[n, i, j] = d w_i / d ln p_j`` and, when
    ``with_income``, a trailing column ``j = G`` for ``d w_i / d ln y``.
    """
    N, G = p.shape
    K = G + (1 if with_income else 0)
    P = [p]
    Y = [y]
    for j in range(K):
        for sign in (1.0, -1.0):
            if j < G:
                q = p.copy()
                q[:, j] *= np.exp(sign * h)
                P.append(q)
                Y.append(y)
            else:
                P.append(p)
                Y.append(y * np.exp(sign * h))
    S = None if s is None else np.tile(s, (2 * K + 1, 1))
    out = np.asarray(model.predict(np.vstack(P), np.concatenate(Y), S)).reshape(2 * K + 1, N, G)
    w = out[0]
    dW = np.empty((N, G, K))
    for j in range(K):
        dW[:, :, j] = (out[1 + 2 * j] - out[2 + 2 * j]) / (2.0 * h)
    return w, dW


@dataclass
class ElasticityMatrix:
    values: np.ndarray
    prices: np.ndarray
    income: float
    state: Optional[np.ndarray]
    h: float


def elasticity_matrix_fd(model, prices, income, state=None, h: float = 1e-4) -> ElasticityMatrix:
    """Quantity elasticities ``d ln q_i / d ln p_j`` at fixed expenditure, at one point."""
    p, y, s = _broadcast_point(prices, income, state)
    if p.shape[0] != 1:
        raise ValueError("elasticity_matrix_fd evaluates a single point")
    w, dW = _log_derivatives(model, p, y, s, h, with_income=False)
    if np.any(w[0] < 1e-8):
        raise ZeroDivisionError("predicted share below 1e-8 at the evaluation point")
    E = dW[0] / w[0][:, None] - np.eye(p.shape[1])
    return ElasticityMatrix(E, p[0], float(y[0]), None if s is None else s[0], h)


@dataclass
class SlutskyMatrix:
    S: np.ndarray

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.S + np.swapaxes(self.S, -1, -2))


def slutsky_at(model, prices, income, state=None, h: float = 1e-4) -> SlutskyMatrix:
    """``S_ij = dw_i/dln p_j + w_j dw_i/dln y`` for every row (``S`` is ``(N, G, G)``, or ``(G, G)`` for one point)."""
    single = np.ndim(prices) == 1
    p, y, s = _broadcast_point(prices, income, state)
    w, dW = _log_derivatives(model, p, y, s, h, with_income=True)
    G = p.shape[1]
    S = dW[:, :, :G] + dW[:, :, G:] * w[:, None, :]
    return SlutskyMatrix(S[0] if single else S)


def lambda_max_3x3(A: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric 3x3 matrix from the trigonometric cubic solution."""
    A = np.asarray(A, dtype=float)
    p1 = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
    q = np.trace(A) / 3.0
    if p1 == 0.0:
        return float(np.max(np.diag(A)))
    p2 = (A[0, 0] - q) ** 2 + (A[1, 1] - q) ** 2 + (A[2, 2] - q) ** 2 + 2.0 * p1
    pp = np.sqrt(p2 / 6.0)
    B = (A - q * np.eye(3)) / pp
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    return float(q + 2.0 * pp * np.cos(phi))


def compensating_variation(
    model,
    p0,
    p1,
    income,
    state=None,
    steps: int = 100,
    mode: str = "per_observation",
    chunk: int = 20000,
) -> float:
    """Welfare effect of moving prices from ``p0`` to ``p1`` (negative = loss).

    The line integral ``-int q(p) . dp`` of Marshallian demand ``q_i = w_i y / p_i``
    along ``p(t) = p0 + t (p1 - p0)`` is approximated with the midpoint rule.
    ``mode="per_observation"`` integrates at each row's own covariates and
    averages; ``mode="mean_point"`` integrates once at the sample means.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    p1 = np.broadcast_to(p1, p0.shape)
    y = np.broadcast_to(np.asarray(income, dtype=float), p0.shape[:1]).astype(float)
    s = None if state is None else np.broadcast_to(np.asarray(state, dtype=float), (p0.shape[0], np.shape(state)[-1]))
    if mode == "mean_point":
        p0, p1, y = p0.mean(0, keepdims=True), p1.mean(0, keepdims=True), y.mean(keepdims=True)
        s = None if s is None else s.mean(0, keepdims=True)
    elif mode != "per_observation":
        raise ValueError(f"unknown CV mode {mode!r}")
    if np.any(p0 <= 0) or np.any(p1 <= 0):
        raise ValueError("prices must be positive")
    N, G = p0.shape
    dp = (p1 - p0) / steps
    tau = (np.arange(steps) + 0.5) / steps
    total = np.zeros(N)
    rows_per = max(1, chunk // max(N, 1))
    for lo in range(0, steps, rows_per):
        t = tau[lo : lo + rows_per]
        P = (p0[None] + t[:, None, None] * (p1 - p0)[None]).reshape(-1, G)
        Y = np.tile(y, len(t))
        S = None if s is None else np.tile(s, (len(t), 1))
        w = np.asarray(model.predict(P, Y, S)).reshape(len(t), N, G)
        q = w * y[None, :, None] / P.reshape(len(t), N, G)
        total -= np.einsum("knj,nj->n", q, dp)
    return float(total.mean())


@dataclass
class RegularityReport:
    n: int
    d_add_max: float
    d_sym_mean: float
    d_sym_max: float
    lambda_max_mean: float
    lambda_max_max: float
    pr_positive_curvature: float
    d_curv_mean: float
    d_hom_mean: float
    d_hom_max: float

    def to_row(self) -> dict:
        return asdict(self)


def regularity_dashboard(
    model, prices, income, state=None, scalars: Sequence[float] = (0.8, 1.2), h: float = 1e-4, tol: float = 1e-10
) -> tuple[RegularityReport, dict]:
    """Near-integrability diagnostics over an evaluation sample.

    Returns the aggregate report plus the per-observation arrays
    (``d_add``, ``d_sym``, ``lambda_max``, ``d_curv``, ``d_hom``).
    ``tol`` is the eigenvalue level above which curvature counts as positive.
    """
    p, y, s = _broadcast_point(prices, income, state)
    if p.shape[0] == 0:
        raise ValueError("empty evaluation sample")
    w = np.asarray(model.predict(p, y, s))
    d_add = np.abs(w.sum(axis=1) - 1.0)
    S = slutsky_at(model, p, y, s, h).S
    d_sym = np.linalg.norm(S - np.swapaxes(S, 1, 2), axis=(1, 2))
    lam = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, 1, 2)))[:, -1]
    d_curv = np.maximum(lam, 0.0)
    d_hom = np.zeros(len(y))
    for c in scalars:
        d_hom += np.max(np.abs(np.asarray(model.predict(c * p, c * y, s)) - w), axis=1)
    d_hom /= len(scalars)
    per = dict(d_add=d_add, d_sym=d_sym, lambda_max=lam, d_curv=d_curv, d_hom=d_hom)
    rep = RegularityReport(
        n=len(y),
        d_add_max=float(d_add.max()),
        d_sym_mean=float(d_sym.mean()),
        d_sym_max=float(d_sym.max()),
        lambda_max_mean=float(lam.mean()),
        lambda_max_max=float(lam.max()),
        pr_positive_curvature=float(np.mean(lam > tol)),
        d_curv_mean=float(d_curv.mean()),
        d_hom_mean=float(d_hom.mean()),
        d_hom_max=float(d_hom.max()),
    )
    return rep, per


def write_elasticity_csv(E: np.ndarray, goods: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["good", *goods])
        for g, row in zip(goods, np.asarray(E)):
            wr.writerow([g, *(f"{v + 0.0:.10g}" for v in row)])
