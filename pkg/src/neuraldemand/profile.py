"""Profile estimation of the habit-decay parameter.

For each decay value on a grid the habit stock is rebuilt, a habit model is
trained on the training rows, and the out-of-sample KL is recorded per test
observation. Bootstrap replicates of the test KL give a standard error per
grid point; the identified set collects grid points whose KL is within
``c`` standard errors of the minimum.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import PanelDataset
from .features import HabitConfig, build_habit_stock, habit_column
from .neural import OBS_FLOOR, TrainConfig, Variant, fit_neural
from .rng import Stream

__all__ = [
    "DEFAULT_GRID",
    "ProfileResult",
    "block_bootstrap_se",
    "circular_block_indices",
    "group_bootstrap_indices",
    "identified_set",
    "per_observation_kl",
    "profile_delta",
    "write_profile_csv",
]

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass
class ProfileResult:
    grid: np.ndarray
    kl: np.ndarray  # NaN where training diverged
    se: np.ndarray
    valid: np.ndarray
    per_obs: Optional[np.ndarray] = None  # (K, n_test) test KL by observation
    se_rule: str = "pointwise"
    records: list = field(default_factory=list)

    @property
    def delta_hat(self) -> float:
        if not self.valid.any():
            raise ValueError("no valid grid point")
        k = np.flatnonzero(self.valid)[np.argmin(self.kl[self.valid])]
        return float(self.grid[k])

    def qualifying(self, c: float) -> np.ndarray:
        """Mask of grid points with ``KL <= min KL + c * SE``."""
        kmin = np.nanmin(np.where(self.valid, self.kl, np.nan))
        if self.se_rule == "pointwise":
            se = self.se
        elif self.se_rule == "max":
            se = np.full_like(self.se, np.nanmax(np.where(self.valid, self.se, np.nan)))
        else:
            raise ValueError(f"unknown SE rule {self.se_rule!r}")
        return self.valid & (self.kl <= kmin + c * se)

    def identified_set(self, c: float) -> tuple[float, float]:
        return identified_set(self, c)


def identified_set(profile: ProfileResult, c: float) -> tuple[float, float]:
    """Interval hull ``(lo, hi)`` of the grid points qualifying at threshold ``c``."""
    q = profile.qualifying(c)
    pts = profile.grid[q]
    return float(pts.min()), float(pts.max())


def per_observation_kl(predicted: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """``sum_i w_i (ln w_i - ln w_hat_i)`` per row with observed shares floored and renormalised."""
    W = np.clip(np.asarray(observed, dtype=float), OBS_FLOOR, 1.0)
    W = W / W.sum(axis=1, keepdims=True)
    P = np.maximum(np.asarray(predicted, dtype=float), 1e-300)
    return np.sum(W * (np.log(W) - np.log(P)), axis=1)


def circular_block_indices(n: int, block: int, B: int, rng: Stream) -> np.ndarray:
    """``B`` circular block-bootstrap index sets of length ``n`` for a single ordered sequence."""
    if block < 1:
        raise ValueError("block length must be positive")
    if block > n:
        raise ValueError(f"block length {block} exceeds the sequence length {n}")
    n_blocks = -(-n // block)
    starts = rng.integers(n, size=(B, n_blocks))
    offs = np.arange(block)
    idx = (starts[:, :, None] + offs[None, None, :]) % n
    return idx.reshape(B, -1)[:, :n]


def group_bootstrap_indices(groups: np.ndarray, B: int, rng: Stream) -> list:
    """Resample whole groups (stores) with replacement; each replicate keeps every row of a drawn group."""
    groups = np.asarray(groups)
    ids = np.unique(groups)
    if ids.size < 2:
        raise ValueError("group bootstrap needs at least two groups")
    rows = [np.flatnonzero(groups == g) for g in ids]
    out = []
    for draw in rng.integers(ids.size, size=(B, ids.size)):
        out.append(np.concatenate([rows[k] for k in draw]))
    return out


def block_bootstrap_se(
    per_obs: np.ndarray,
    B: int = 50,
    block: int = 50,
    groups: Optional[np.ndarray] = None,
    seed: int = 0,
    resampler: Optional[Callable[[], Sequence[np.ndarray]]] = None,
) -> np.ndarray:
    """Bootstrap SE of the mean test KL at every grid point.

    ``per_obs`` is ``(K, n)``. With ``groups`` holding more than one distinct
    id, stores are resampled; otherwise the rows are one ordered sequence and
    circular blocks of length ``block`` are used. The same replicate indices
    are shared by every grid point. ``resampler`` overrides both and must
    return the replicate index arrays.
    """
    K = np.atleast_2d(np.asarray(per_obs, dtype=float))
    n = K.shape[1]
    if resampler is not None:
        reps = list(resampler())
    else:
        if B < 50:
            raise ValueError("use at least 50 bootstrap replicates")
        rng = Stream(seed, "bootstrap")
        if groups is not None and np.unique(groups).size > 1:
            reps = group_bootstrap_indices(groups, B, rng)
        else:
            reps = list(circular_block_indices(n, block, B, rng))
    stats = np.array([K[:, idx].mean(axis=1) for idx in reps])  # (B, K)
    return stats.std(axis=0, ddof=1) if len(reps) > 1 else np.zeros(K.shape[0])


def _test_mask(data: PanelDataset, test_mask) -> np.ndarray:
    if test_mask is not None:
        m = np.asarray(test_mask, dtype=bool)
    elif data.split is not None:
        m = np.asarray(data.split) == "test"
    else:
        raise ValueError("need a test mask or a split column")
    if m.all() or not m.any():
        raise ValueError("train and test sides must both be non-empty")
    return m


def profile_delta(
    data: PanelDataset,
    grid: Sequence[float] = DEFAULT_GRID,
    cfg: Optional[TrainConfig] = None,
    seed: int = 0,
    test_mask=None,
    space: str = "quantity",
    B: int = 50,
    block: int = 50,
    se_rule: str = "pointwise",
    variant_kw: Optional[dict] = None,
) -> ProfileResult:
    """Train one habit model per grid point and profile the test KL.

    ``data`` holds both sides in time order so that test-row habit stocks
    use the full pre-test history; ``test_mask`` (or ``data.split == "test"``)
    selects the evaluation rows. Every grid point shares the weight-init seed
    and mini-batch stream, so differences reflect the decay value alone.
    """
    cfg = cfg or TrainConfig()
    g = np.asarray(grid, dtype=float)
    if g.size == 0 or np.any((g <= 0) | (g >= 1)):
        raise ValueError("grid must be non-empty and inside (0, 1)")
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing")
    test = _test_mask(data, test_mask)
    K = len(g)
    kl = np.full(K, np.nan)
    valid = np.zeros(K, dtype=bool)
    per_obs = np.full((K, int(test.sum())), np.nan)
    records = []
    for k, d in enumerate(g):
        hd = build_habit_stock(data, HabitConfig(float(d), space=space))
        variant = Variant(habit=float(d), **(variant_kw or {}))
        res = fit_neural(hd.subset(np.flatnonzero(~test)), variant, cfg, seed=seed)
        te = hd.subset(np.flatnonzero(test))
        w = res.model.predict(te.prices, te.income, te.columns[habit_column(float(d))])
        po = per_observation_kl(w, te.shares)
        ok = res.error is None and bool(np.all(np.isfinite(po)))
        if ok:
            per_obs[k] = po
            kl[k] = po.mean()
            valid[k] = True
        else:
            log.warning("grid point delta=%.3f excluded: %s", d, res.error or "non-finite test KL")
        records.append(dict(delta=float(d), test_kl=float(kl[k]), train_kl=res.best_kl, best_epoch=res.best_epoch, valid=ok))
    se = np.full(K, np.nan)
    if valid.any():
        groups = data.group[test]
        se[valid] = block_bootstrap_se(per_obs[valid], B=B, block=block, groups=groups, seed=seed)
    return ProfileResult(g, kl, se, valid, per_obs, se_rule, records)


def write_profile_csv(profile: ProfileResult, path) -> None:
    q1 = profile.qualifying(1.0)
    q2 = profile.qualifying(2.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "test_kl", "se", "in_IS_c1", "in_IS_c2"])
        for k, d in enumerate(profile.grid):
            w.writerow([f"{d:.4f}", f"{profile.kl[k]:.10e}", f"{profile.se[k]:.10e}", int(q1[k]), int(q2[k])])
