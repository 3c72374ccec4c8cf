"""Classical demand-system comparators.

All models expose ``predict(prices, income, state=None) -> (N, G)`` shares so
they plug into the metric and welfare code unchanged.
"""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import PanelDataset
from .features import LINEAR_VARIANTS, build_linear_features
from .regression import add_intercept, ols, tsls

__all__ = [
    "AidsModel",
    "BlpModel",
    "LinearDemandModel",
    "QuaidsModel",
    "SeriesModel",
    "fit_blp_logit_iv",
    "fit_la_aids",
    "fit_linear_demand",
    "fit_quaids",
    "fit_series",
    "predict_benchmark",
    "write_params_csv",
]

log = logging.getLogger(__name__)

CLIP = 1e-6


def _ln(p, y):
    return np.log(np.atleast_2d(np.asarray(p, dtype=float))), np.log(np.asarray(y, dtype=float)).reshape(-1)


def _need_rows(data: PanelDataset):
    G = data.G
    if len(data) < G * (G + 2):
        raise ValueError(f"need at least {G * (G + 2)} observations, got {len(data)}")


# --------------------------------------------------------------------- LA-AIDS


@dataclass
class AidsModel:
    alpha: np.ndarray
    gamma: np.ndarray  # gamma[i, j]: equation i, log price j
    beta: np.ndarray
    stone_weights: np.ndarray
    name: str = "LA-AIDS"

    def log_price_index(self, lp):
        return lp @ self.stone_weights

    def predict(self, prices, income, state=None):
        lp, ly = _ln(prices, income)
        return self.alpha + lp @ self.gamma.T + np.outer(ly - self.log_price_index(lp), self.beta)

    def params(self):
        yield from _flatten(self.name, alpha=self.alpha, gamma=self.gamma, beta=self.beta)


def fit_la_aids(train: PanelDataset) -> AidsModel:
    """Equation-by-equation OLS with a Stone index built from sample-mean shares."""
    _need_rows(train)
    wbar = train.shares.mean(axis=0)
    lp, ly = _ln(train.prices, train.income)
    X = add_intercept(np.column_stack([lp, ly - lp @ wbar]))
    res = ols(X, train.shares)
    G = train.G
    c = res.coef
    return AidsModel(alpha=c[0], gamma=c[1 : G + 1].T.copy(), beta=c[G + 1], stone_weights=wbar)


# ---------------------------------------------------------------------- QUAIDS


@dataclass
class QuaidsModel:
    alpha0: float
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    converged: bool = True
    iterations: int = 0
    name: str = "QUAIDS"

    def log_a(self, lp):
        return self.alpha0 + lp @ self.alpha + 0.5 * np.einsum("nk,kj,nj->n", lp, self.gamma, lp)

    def b(self, lp):
        return np.exp(lp @ self.beta)

    def predict(self, prices, income, state=None):
        lp, ly = _ln(prices, income)
        r = ly - self.log_a(lp)
        return self.alpha + lp @ self.gamma.T + np.outer(r, self.beta) + np.outer(r**2 / self.b(lp), self.lam)

    def restriction_residuals(self) -> dict:
        return {
            "sum_alpha": abs(self.alpha.sum() - 1.0),
            "sum_beta": abs(self.beta.sum()),
            "sum_lambda": abs(self.lam.sum()),
            "gamma_columns": float(np.abs(self.gamma.sum(axis=0)).max()),
            "gamma_rows": float(np.abs(self.gamma.sum(axis=1)).max()),
            "gamma_symmetry": float(np.abs(self.gamma - self.gamma.T).max()),
        }

    def params(self):
        yield from _flatten(self.name, alpha0=np.array([self.alpha0]), alpha=self.alpha, gamma=self.gamma, beta=self.beta, lam=self.lam)


def _quaids_design(lp, r, binv, G, quadratic):
    """Stacked design for equations 0..G-2 with homogeneity and symmetry built in.

    Free parameters: alpha_i, beta_i, (lambda_i), and gamma_kl for k <= l < G-1
    with gamma_{i,G-1} = -sum_{l<G-1} gamma_il.
    """
    N = len(r)
    m = G - 1
    pairs = [(k, l) for k in range(m) for l in range(k, m)]
    rel = lp[:, :m] - lp[:, [m]]
    blocks = 3 if quadratic else 2
    ncol = blocks * m + len(pairs)
    X = np.zeros((m * N, ncol))
    for i in range(m):
        rows = slice(i * N, (i + 1) * N)
        X[rows, i] = 1.0
        X[rows, m + i] = r
        if quadratic:
            X[rows, 2 * m + i] = r**2 * binv
        for c, (k, l) in enumerate(pairs):
            col = blocks * m + c
            if i == k:
                X[rows, col] += rel[:, l]
            if i == l and k != l:
                X[rows, col] += rel[:, k]
    return X, pairs


def _quaids_unpack(coef, pairs, G, quadratic):
    m = G - 1
    alpha = np.append(coef[:m], 1.0 - coef[:m].sum())
    beta = np.append(coef[m : 2 * m], -coef[m : 2 * m].sum())
    if quadratic:
        lam = np.append(coef[2 * m : 3 * m], -coef[2 * m : 3 * m].sum())
        off = 3 * m
    else:
        lam = np.zeros(G)
        off = 2 * m
    gamma = np.zeros((G, G))
    for c, (k, l) in enumerate(pairs):
        gamma[k, l] = gamma[l, k] = coef[off + c]
    gamma[:m, m] = -gamma[:m, :m].sum(axis=1)
    gamma[m, :m] = gamma[:m, m]
    gamma[m, m] = -gamma[m, :m].sum()
    return alpha, gamma, beta, lam


def fit_quaids(
    train: PanelDataset, quadratic: bool = True, tol: float = 1e-8, max_iter: int = 100, alpha0: Optional[float] = None
) -> QuaidsModel:
    """Iterated restricted least squares.

    Given the translog index ``a(p)`` and ``b(p)`` from the previous iterate,
    the share equations are linear in ``(alpha, gamma, beta, lambda)``; the
    restricted system is solved by stacked OLS and the indices updated until
    the largest parameter change is below ``tol``. ``quadratic=False`` fits
    AIDS with the translog index.
    """
    _need_rows(train)
    G = train.G
    lp, ly = _ln(train.prices, train.income)
    if alpha0 is None:
        alpha0 = float(np.min(np.sum(train.shares * lp, axis=1)) - 1.0)
    model = QuaidsModel(alpha0, train.shares.mean(axis=0), np.zeros((G, G)), np.zeros(G), np.zeros(G))
    Yst = train.shares[:, : G - 1].T.reshape(-1)
    prev = None
    converged = False
    best, best_ssr = None, np.inf
    for it in range(1, max_iter + 1):
        r = ly - model.log_a(lp)
        X, pairs = _quaids_design(lp, r, 1.0 / model.b(lp), G, quadratic)
        coef = ols(X, Yst).coef
        alpha, gamma, beta, lam = _quaids_unpack(coef, pairs, G, quadratic)
        model = QuaidsModel(alpha0, alpha, gamma, beta, lam, iterations=it)
        ssr = float(np.sum((model.predict(train.prices, train.income) - train.shares) ** 2))
        if ssr < best_ssr:
            best, best_ssr = model, ssr
        if prev is not None and np.max(np.abs(coef - prev)) < tol:
            converged = True
            break
        prev = coef
    if not converged:
        # weakly identified income terms (e.g. homothetic data) make the map wander;
        # keep the iterate that fits best under its own indices
        log.warning("QUAIDS iteration did not converge in %d steps; returning best-fitting iterate", max_iter)
        model = best
        model.iterations = max_iter
    model.converged = converged
    return model


# ----------------------------------------------------------- linear demand (KL)


@dataclass
class LinearDemandModel:
    theta: np.ndarray
    variant: str
    basis: dict = field(default_factory=dict)
    lam: float = 1e-4
    steps: int = 20000
    history: list = field(default_factory=list)

    @property
    def name(self):
        return f"LD ({self.variant})"

    def logits(self, prices, income):
        d = PanelDataset(prices, income, np.zeros_like(prices), np.zeros(len(prices)), np.arange(len(prices)))
        X = build_linear_features(d, self.variant, basis=self.basis or None).values
        return X @ self.theta

    def predict(self, prices, income, state=None):
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        z = self.logits(prices, np.broadcast_to(income, prices.shape[:1]))
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def params(self):
        yield from _flatten(self.name, theta=self.theta)


def fit_linear_demand(
    train: PanelDataset,
    variant: str = "shared",
    steps: int = 20000,
    lr0: float = 0.05,
    decay_steps: float = 1000.0,
    lam: float = 1e-4,
    record_every: int = 1000,
) -> LinearDemandModel:
    """Full-batch gradient descent on mean KL + ``lam * ||theta||^2``, step ``lr0 / (1 + t / decay_steps)``.

    One coefficient vector is shared by all goods; goods differ only through
    their feature rows.
    """
    if variant not in LINEAR_VARIANTS:
        raise ValueError(f"variant must be one of {LINEAR_VARIANTS}")
    F = build_linear_features(train, variant)
    X = F.values
    W = train.shares
    N = len(W)
    theta = np.zeros(X.shape[2])
    basis = {k: v for k, v in F.flags.items() if k in ("mean", "R", "zero_q_columns")}
    hist = []
    logw = np.log(np.maximum(W, 1e-300))
    for t in range(steps):
        z = X @ theta
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        what = e / e.sum(axis=1, keepdims=True)
        grad = np.einsum("ng,ngk->k", what - W, X) / N + 2.0 * lam * theta
        if record_every and t % record_every == 0:
            kl = np.mean(np.sum(np.where(W > 0, W * (logw - np.log(what)), 0.0), axis=1))
            hist.append((t, float(kl)))
        theta -= lr0 / (1.0 + t / decay_steps) * grad
    return LinearDemandModel(theta, variant, basis, lam, steps, hist)


# ---------------------------------------------------------------------- series


def _monomials(d, degree):
    return [e for e in itertools.product(range(degree + 1), repeat=d) if sum(e) <= degree]


@dataclass
class SeriesModel:
    coef: np.ndarray  # (K, G-1)
    exponents: list
    center: np.ndarray
    scale: np.ndarray
    penalty: float
    jitter: bool = False
    name: str = "Series"

    def _z(self, prices, income):
        lp, ly = _ln(prices, income)
        return (np.column_stack([lp, ly]) - self.center) / self.scale

    def basis(self, z):
        return _basis(z, self.exponents)

    def predict(self, prices, income, state=None):
        m = self.basis(self._z(prices, income)) @ self.coef
        return np.column_stack([m, 1.0 - m.sum(axis=1)])

    def asymmetry(self, prices, income):
        """Frobenius norm of ``S - S^T`` at each row (linearised Slutsky terms)."""
        z = self._z(prices, income)
        w = self.predict(prices, income)
        D = _derivative_bases(z, self.exponents, self.scale)  # (d, M, K)
        G = w.shape[1]
        dm = np.einsum("dmk,kg->mgd", D, self.coef)
        dm = np.concatenate([dm, -dm.sum(axis=1, keepdims=True)], axis=1)  # (M, G, d)
        S = dm[:, :, :G] + dm[:, :, [G]] * w[:, None, :]
        return np.linalg.norm(S - np.swapaxes(S, 1, 2), axis=(1, 2))

    def params(self):
        yield from _flatten(self.name, coef=self.coef)


def _basis(z, exps):
    return np.column_stack([np.prod(z ** np.array(e), axis=1) for e in exps])


def _derivative_bases(z, exps, scale):
    """``D[v, m, k]`` = d basis_k / d (raw log variable v) at row m."""
    d = z.shape[1]
    out = np.zeros((d, len(z), len(exps)))
    for k, e in enumerate(exps):
        e = np.array(e)
        for v in range(d):
            if e[v] == 0:
                continue
            ev = e.copy()
            ev[v] -= 1
            out[v, :, k] = e[v] * np.prod(z**ev, axis=1) / scale[v]
    return out


def fit_series(train: PanelDataset, degree: int = 3, penalty: float = 100.0, grid_levels=(10, 50, 90)) -> SeriesModel:
    """Polynomial series regression with a soft Slutsky-symmetry penalty.

    Shares of goods ``0..G-2`` are polynomials of total degree ``degree`` in
    standardised ``(ln p, ln y)``; the last good follows from adding-up. The
    penalty is ``penalty * mean_grid ||S - S^T||_F^2`` over a grid of
    ``3^G * 3`` points built from sample quantiles, with the ``w_j`` factor in
    the income term frozen at an unpenalised pilot fit so the problem stays
    quadratic.
    """
    G = train.G
    lp, ly = _ln(train.prices, train.income)
    V = np.column_stack([lp, ly])
    center, scale = V.mean(axis=0), V.std(axis=0)
    scale[scale == 0] = 1.0
    exps = _monomials(G + 1, degree)
    K = len(exps)
    if len(train) < K:
        raise ValueError(f"series basis has {K} terms but only {len(train)} observations")
    Phi = _basis((V - center) / scale, exps)
    Y = train.shares[:, : G - 1]
    N = len(train)
    m = G - 1

    # data term in the stacked unknown c = vec(coef) (good-major)
    A = np.kron(np.eye(m), Phi.T @ Phi) / N
    b = (Phi.T @ Y).T.reshape(-1) / N

    def solve(Amat, bvec):
        jit = False
        try:
            if np.linalg.cond(Amat) > 1e12:
                raise np.linalg.LinAlgError
            x = np.linalg.solve(Amat, bvec)
        except np.linalg.LinAlgError:
            jit = True
            x = np.linalg.solve(Amat + 1e-8 * np.eye(len(Amat)), bvec)
        return x, jit

    c0, jitter = solve(A, b)
    model = SeriesModel(c0.reshape(m, K).T, exps, center, scale, penalty, jitter)
    if penalty > 0:
        qs = [np.percentile(V[:, v], grid_levels) for v in range(G + 1)]
        grid = np.array(list(itertools.product(*qs)))
        M = len(grid)
        zg = (grid - center) / scale
        wg = model.predict(np.exp(grid[:, :G]), np.exp(grid[:, G]))
        D = _derivative_bases(zg, exps, scale)  # (G+1, M, K)
        # dm_i/dv for goods i < m are D[v] @ c_i; good G-1 is minus their sum
        rows = []
        for i in range(G):
            for j in range(i + 1, G):
                # S_ij - S_ji as a linear map of c (M x mK)
                L = np.zeros((M, m * K))

                def add(L, good, v, weight):
                    blk = D[v] * weight[:, None]
                    if good < m:
                        L[:, good * K : (good + 1) * K] += blk
                    else:
                        for g in range(m):
                            L[:, g * K : (g + 1) * K] -= blk

                add(L, i, j, np.ones(M))
                add(L, i, G, wg[:, j])
                add(L, j, i, -np.ones(M))
                add(L, j, G, -wg[:, i])
                rows.append(L)
        Lall = np.vstack(rows)
        c, jit2 = solve(A + penalty * Lall.T @ Lall / M, b)
        model = SeriesModel(c.reshape(m, K).T, exps, center, scale, penalty, jitter or jit2)
    if model.jitter:
        log.warning("series Gram matrix ill-conditioned; ridge jitter 1e-8 added")
    return model


# ------------------------------------------------------------------------- BLP


@dataclass
class BlpModel:
    coef: np.ndarray  # (1 + G, G - 1): intercept and price slopes for each non-base good
    first_stage_F: np.ndarray
    weak: bool
    name: str = "BLP (IV)"

    def predict(self, prices, income=None, state=None):
        p = np.atleast_2d(np.asarray(prices, dtype=float))
        delta = add_intercept(p) @ self.coef
        z = np.column_stack([delta, np.zeros(len(p))])
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def params(self):
        yield from _flatten(self.name, coef=self.coef, first_stage_F=self.first_stage_F)


def fit_blp_logit_iv(train: PanelDataset, instruments: Optional[np.ndarray] = None) -> BlpModel:
    """Logit log-odds against the last good, 2SLS with all prices endogenous."""
    Zr = train.instruments if instruments is None else instruments
    if Zr is None:
        raise ValueError("BLP needs instruments")
    W = np.maximum(train.shares, CLIP)
    delta = np.log(W[:, :-1]) - np.log(W[:, [-1]])
    X = add_intercept(train.prices)
    Z = add_intercept(Zr)
    # first-stage F for each endogenous price
    F = np.empty(train.G)
    n, k = Z.shape
    for g in range(train.G):
        u = ols(Z, X[:, g + 1])
        rss_r = np.sum((X[:, g + 1] - X[:, g + 1].mean()) ** 2)
        F[g] = ((rss_r - u.rss) / (k - 1)) / (u.rss / (n - k)) if u.rss > 0 else np.inf
    weak = bool(np.any(F < 10))
    if weak:
        warnings.warn(f"weak first stage in BLP (min F = {F.min():.2f})", RuntimeWarning)
    res = tsls(X, delta, Z)
    return BlpModel(res.coef, F, weak)


# ------------------------------------------------------------------- plumbing


def predict_benchmark(model, data: PanelDataset, for_kl: bool = False) -> np.ndarray:
    """Shares on ``data``; ``for_kl`` clips to ``[1e-6, 1]`` and renormalises."""
    w = np.asarray(model.predict(data.prices, data.income))
    if for_kl:
        w = np.clip(w, CLIP, 1.0)
        w = w / w.sum(axis=1, keepdims=True)
    return w


def _flatten(name, **arrays):
    for key, arr in arrays.items():
        arr = np.atleast_1d(np.asarray(arr, dtype=float))
        for idx in np.ndindex(arr.shape):
            label = key if arr.size == 1 else f"{key}[{','.join(map(str, idx))}]"
            yield name, label, float(arr[idx])


def write_params_csv(models, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "parameter", "value"])
        for m in models:
            for row in m.params():
                w.writerow([row[0], row[1], repr(row[2])])
