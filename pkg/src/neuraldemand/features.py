"""State features: habit stocks, lag windows, placebo shuffles and linear-demand bases."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import PanelDataset
from .rng import Stream

__all__ = [
    "FeatureMatrix",
    "HabitConfig",
    "build_habit_stock",
    "build_linear_features",
    "build_window_features",
    "habit_column",
    "habit_recursion",
    "history_matrix",
    "placebo_shuffle",
]

log = logging.getLogger(__name__)

SHARE_FLOOR = 1e-6


@dataclass(frozen=True)
class HabitConfig:
    delta: float = 0.7
    space: str = "quantity"  # or "log_share"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.space not in ("quantity", "log_share"):
            raise ValueError(f"unknown habit space {self.space!r}")


@dataclass
class FeatureMatrix:
    values: np.ndarray
    columns: list
    variant: str
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim < 2 or self.values.shape[-1] != len(self.columns):
            raise ValueError("column names do not match feature width")

    def to_csv(self, path) -> None:
        """Write a header row plus one row per observation (per good for 3-D bases)."""
        v = self.values
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if v.ndim == 3:
                w.writerow(["obs", "good", *self.columns])
                for n in range(v.shape[0]):
                    for g in range(v.shape[1]):
                        w.writerow([n, g, *(repr(float(x)) for x in v[n, g])])
            else:
                w.writerow(self.columns)
                w.writerows([[repr(float(x)) for x in row] for row in v])


def habit_column(delta: float) -> str:
    return f"habit_{delta:.4f}"


def history_matrix(data: PanelDataset, space: str) -> np.ndarray:
    if space == "quantity":
        return data.quantities
    return np.log(np.maximum(data.shares, SHARE_FLOOR))


def habit_recursion(h: np.ndarray, group: np.ndarray, delta: float, init: np.ndarray) -> np.ndarray:
    """``xbar_t = delta * xbar_{t-1} + (1 - delta) * h_{t-1}``, restarting at ``init`` in each group.

    Rows are assumed time-ordered within each group; groups may be interleaved.
    """
    out = np.empty_like(h, dtype=float)
    for g in np.unique(group):
        rows = np.flatnonzero(group == g)
        if rows.size == 0:
            continue
        x = np.array(init, dtype=float)
        hg = h[rows]
        block = np.empty((rows.size, h.shape[1]))
        block[0] = x
        for t in range(1, rows.size):
            x = delta * x + (1.0 - delta) * hg[t - 1]
            block[t] = x
        out[rows] = block
    return out


def build_habit_stock(data: PanelDataset, cfg: HabitConfig, init_rows=None) -> PanelDataset:
    """Append the habit stock for ``cfg.delta`` as ``data.columns[habit_column(delta)]``.

    Each group's first row is set to the global column mean of the history
    variable, which is also the value the recursion restarts from. Pass
    ``init_rows`` (a boolean mask, typically the training rows) to take that
    mean over a subset so later rows cannot influence earlier stocks.
    """
    if not data.is_time_ordered():
        raise ValueError("data must be time-ordered within groups")
    h = history_matrix(data, cfg.space)
    init = h.mean(axis=0) if init_rows is None else h[np.asarray(init_rows, dtype=bool)].mean(axis=0)
    out = data.copy()
    out.columns[habit_column(cfg.delta)] = habit_recursion(h, data.group, cfg.delta, init)
    out.meta.setdefault("habit_space", cfg.space)
    return out


def _lag(arr: np.ndarray, group: np.ndarray, lag: int, fill: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    out[:] = fill
    for g in np.unique(group):
        rows = np.flatnonzero(group == g)
        if rows.size > lag:
            out[rows[lag:]] = arr[rows[:-lag]]
    return out


def build_window_features(data: PanelDataset, L: int = 4, history: str = "log_quantity") -> FeatureMatrix:
    """Columns ``[ln p_t, ln y_t, (ln p_{t-l}, ln q_{t-l}) for l = 1..L]``.

    ``history="log_share"`` swaps lagged log quantities for lagged log shares
    (used on scanner panels). Missing lags at group starts hold the global
    column mean.
    """
    if L < 1:
        raise ValueError("window length must be at least 1")
    G = data.G
    lp = data.log_prices
    if history == "log_quantity":
        lh = np.log(np.maximum(data.quantities, SHARE_FLOOR))
        tag = "lnq"
    elif history == "log_share":
        lh = np.log(np.maximum(data.shares, SHARE_FLOOR))
        tag = "lnw"
    else:
        raise ValueError(f"unknown history kind {history!r}")
    blocks = [lp, data.log_income[:, None]]
    names = [f"lnp{g}" for g in range(G)] + ["lny"]
    for ell in range(1, L + 1):
        blocks.append(_lag(lp, data.group, ell, lp.mean(axis=0)))
        blocks.append(_lag(lh, data.group, ell, lh.mean(axis=0)))
        names += [f"lnp{g}_l{ell}" for g in range(G)] + [f"{tag}{g}_l{ell}" for g in range(G)]
    return FeatureMatrix(np.hstack(blocks), names, "window")


def placebo_shuffle(columns: dict, seed: int, split=None) -> dict:
    """Permute history columns jointly, independently within each split label.

    One permutation per split is applied to every array in ``columns`` so
    rows stay internally consistent; marginals are preserved exactly.
    """
    arrays = {k: np.asarray(v) for k, v in columns.items()}
    if not arrays:
        return {}
    n = len(next(iter(arrays.values())))
    if any(len(v) != n for v in arrays.values()):
        raise ValueError("history columns differ in length")
    labels = np.zeros(n, dtype=object) if split is None else np.asarray(split, dtype=object)
    perm = np.arange(n)
    rng = Stream(seed, "placebo")
    for lab in sorted(set(labels.tolist()), key=str):
        if lab not in ("train", "test", 0):
            raise ValueError(f"split labels must be train/test, got {lab!r}")
        rows = np.flatnonzero(labels == lab)
        perm[rows] = rows[rng.child(str(lab)).permutation(rows.size)]
    return {k: v[perm] for k, v in arrays.items()}


LINEAR_VARIANTS = ("shared", "goodspec", "orth")


def build_linear_features(data: PanelDataset, variant: str, basis: dict | None = None) -> FeatureMatrix:
    """Per-good feature tensor ``(N, G, K)`` for the linear-logit demand baseline.

    shared    ``[ln p_g, ln^2 p_g, ln y]``
    goodspec  ``[ln p_0..ln p_{G-1}, ln^2 p_g, ln y]``
    orth      ``[e_g, Q_1..Q_G, ln^2 p_g, ln y]`` with ``Q`` the thin-QR factor of
              the column-demeaned log-price matrix

    For ``orth``, passing ``basis=train_features.flags`` maps new data through
    the training rotation ``Q = (ln p - mean_train) R^{-1}`` so fitted
    coefficients stay meaningful out of sample.
    """
    lp = data.log_prices
    N, G = lp.shape
    lny = np.broadcast_to(data.log_income[:, None, None], (N, G, 1))
    sq = (lp**2)[:, :, None]
    flags = {}
    if variant == "shared":
        X = np.concatenate([lp[:, :, None], sq, lny], axis=2)
        cols = ["lnp_own", "lnp_own_sq", "lny"]
    elif variant == "goodspec":
        allp = np.broadcast_to(lp[:, None, :], (N, G, G))
        X = np.concatenate([allp, sq, lny], axis=2)
        cols = [f"lnp{g}" for g in range(G)] + ["lnp_own_sq", "lny"]
    elif variant == "orth":
        if basis is None:
            mean = lp.mean(axis=0)
            Q, R = np.linalg.qr(lp - mean, mode="reduced")
            if Q.shape[1] < G:  # fewer rows than goods: pad to G factors
                k = Q.shape[1]
                Q = np.hstack([Q, np.zeros((N, G - k))])
                R = np.vstack([R, np.zeros((G - k, G))])
            scale = np.abs(np.diag(R))
            top = scale.max() if scale.size and scale.max() > 0 else 1.0
            zero = scale <= max(N, G) * np.finfo(float).eps * top
            if zero.any():
                Q[:, zero] = 0.0
                log.warning("rank-deficient price matrix: Q columns %s zeroed", np.flatnonzero(zero).tolist())
            flags.update(mean=mean, R=R, zero_q_columns=np.flatnonzero(zero).tolist())
        else:
            mean, R = basis["mean"], basis["R"]
            zero = np.zeros(G, dtype=bool)
            zero[basis.get("zero_q_columns", [])] = True
            Rs = R.copy()
            Rs[zero, zero] = 1.0
            Q = np.linalg.solve(Rs.T, (lp - mean).T).T
            Q[:, zero] = 0.0
            flags.update(basis)
        eye = np.broadcast_to(np.eye(G)[None], (N, G, G))
        Qb = np.broadcast_to(Q[:, None, :], (N, G, G))
        X = np.concatenate([eye, Qb, sq, lny], axis=2)
        cols = [f"e{g}" for g in range(G)] + [f"q{g}" for g in range(G)] + ["lnp_own_sq", "lny"]
    else:
        raise ValueError(f"variant must be one of {LINEAR_VARIANTS}")
    return FeatureMatrix(np.ascontiguousarray(X, dtype=float), cols, variant, flags)
