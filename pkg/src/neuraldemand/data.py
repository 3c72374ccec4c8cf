"""Column-oriented panel container shared by the simulators and the scanner pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = ["Observation", "PanelDataset"]


@dataclass(frozen=True)
class Observation:
    """One store-week (or simulated period)."""

    prices: np.ndarray
    income: float
    shares: np.ndarray
    instruments: Optional[np.ndarray] = None
    habit: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    group: int = 0
    time: int = 0

    @property
    def log_prices(self):
        return np.log(self.prices)

    @property
    def log_income(self):
        return float(np.log(self.income))


@dataclass
class PanelDataset:
    """Observations stored as aligned arrays, one row per observation.

    ``habit`` holds the data-generating habit stock when one exists (the
    habit DGP); estimated habit stocks live in ``columns`` under names like
    ``"habit_0.70"`` so several decay values can coexist.
    """

    prices: np.ndarray
    income: np.ndarray
    shares: np.ndarray
    group: np.ndarray
    time: np.ndarray
    goods: tuple = ("good0", "good1", "good2")
    instruments: Optional[np.ndarray] = None
    habit: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None
    columns: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        self.income = np.asarray(self.income, dtype=float).reshape(-1)
        self.shares = np.asarray(self.shares, dtype=float)
        n = len(self.income)
        self.group = np.asarray(self.group, dtype=np.int64).reshape(-1)
        self.time = np.asarray(self.time, dtype=np.int64).reshape(-1)
        if self.prices.shape != self.shares.shape or self.prices.shape[0] != n:
            raise ValueError("prices, shares and income disagree on shape")
        if len(self.group) != n or len(self.time) != n:
            raise ValueError("group/time length mismatch")
        if len(self.goods) != self.prices.shape[1]:
            self.goods = tuple(f"good{g}" for g in range(self.prices.shape[1]))
        self.goods = tuple(self.goods)

    def __len__(self):
        return len(self.income)

    def __getitem__(self, i: int) -> Observation:
        opt = lambda a: None if a is None else a[i]  # noqa: E731
        return Observation(
            self.prices[i],
            float(self.income[i]),
            self.shares[i],
            opt(self.instruments),
            opt(self.habit),
            opt(self.xi),
            int(self.group[i]),
            int(self.time[i]),
        )

    @property
    def G(self) -> int:
        return self.prices.shape[1]

    @property
    def log_prices(self) -> np.ndarray:
        return np.log(self.prices)

    @property
    def log_income(self) -> np.ndarray:
        return np.log(self.income)

    @property
    def quantities(self) -> np.ndarray:
        return self.shares * self.income[:, None] / self.prices

    def subset(self, index) -> "PanelDataset":
        index = np.asarray(index)
        take = lambda a: None if a is None else a[index]  # noqa: E731
        return replace(
            self,
            prices=self.prices[index],
            income=self.income[index],
            shares=self.shares[index],
            group=self.group[index],
            time=self.time[index],
            instruments=take(self.instruments),
            habit=take(self.habit),
            xi=take(self.xi),
            split=take(self.split),
            columns={k: v[index] for k, v in self.columns.items()},
            meta=dict(self.meta),
        )

    def copy(self) -> "PanelDataset":
        return self.subset(np.arange(len(self)))

    def with_prices(self, prices: np.ndarray, shares: np.ndarray) -> "PanelDataset":
        out = self.copy()
        out.prices = np.asarray(prices, dtype=float)
        out.shares = np.asarray(shares, dtype=float)
        return out

    def is_time_ordered(self) -> bool:
        for g in np.unique(self.group):
            t = self.time[self.group == g]
            if np.any(np.diff(t) < 0):
                return False
        return True
