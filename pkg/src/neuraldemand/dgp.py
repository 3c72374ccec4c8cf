"""Simulation designs with closed-form demand, elasticity and welfare oracles.

Six data-generating processes share one experimental design: cost shifters
``Z ~ U(1, 5)^G``, prices ``p = Z + nu`` with ``nu ~ N(0, 0.1^2)`` and
expenditure ``y ~ U(1200, 2000)``. Each DGP maps ``(p, y[, habit])`` to
Marshallian budget shares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data import PanelDataset
from .rng import Stream

__all__ = [
    "CES",
    "EndogenousCES",
    "HabitCES",
    "InfeasibleIncome",
    "Leontief",
    "Quasilinear",
    "SimConfig",
    "StoneGeary",
    "apply_price_shock",
    "ces_price_index",
    "ces_true_cv",
    "ces_true_elasticities",
    "generate_dataset",
    "oracle_shares",
    "DGP_NAMES",
    "make_dgp",
]

log = logging.getLogger(__name__)

GOODS = ("Food", "Fuel", "Other")


class InfeasibleIncome(ValueError):
    """Expenditure does not cover the subsistence bundle."""


@dataclass
class SimConfig:
    G: int = 3
    N: int = 800
    seed: int = 0
    z_bounds: tuple = (1.0, 5.0)
    price_noise_sd: float = 0.1
    income_bounds: tuple = (1200.0, 2000.0)
    shock_good: int = 1
    shock_factor: float = 1.2

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not (self.z_bounds[0] < self.z_bounds[1] and self.income_bounds[0] < self.income_bounds[1]):
            raise ValueError("bounds must be ordered")
        if self.shock_factor <= 0:
            raise ValueError("shock factor must be positive")


def _ces_shares(alpha, sigma, p):
    t = alpha**sigma * p ** (1.0 - sigma)
    return t / t.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CES:
    alpha: tuple = (0.4, 0.4, 0.2)
    rho: float = 0.45
    kind = "ces"

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if abs(sum(self.alpha) - 1) > 1e-12:
            raise ValueError("alpha must sum to one")

    @property
    def sigma(self) -> float:
        return 1.0 / (1.0 - self.rho)

    def shares(self, p, y=None, habit=None):
        return _ces_shares(np.asarray(self.alpha), self.sigma, np.asarray(p, dtype=float))

    def utility(self, x):
        a = np.asarray(self.alpha)
        return np.sum(a * np.asarray(x) ** self.rho, axis=-1) ** (1.0 / self.rho)


@dataclass(frozen=True)
class Quasilinear:
    """``U = x0 + a1 log(x1 + 1) + a2 log(x2 + 1)``; good 0 is the numeraire."""

    a: tuple = (1.5, 0.8)
    kind = "quasilinear"

    def shares(self, p, y, habit=None):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        y = np.broadcast_to(np.asarray(y, dtype=float), p.shape[:1])
        x = np.zeros_like(p)
        for i, ai in enumerate(self.a, start=1):
            x[:, i] = np.maximum(ai * p[:, 0] / p[:, i] - 1.0, 0.0)
        rest = y - (p[:, 1:] * x[:, 1:]).sum(axis=1)
        if np.any(rest < 0):
            raise InfeasibleIncome("budget does not cover the interior non-numeraire demands")
        x[:, 0] = rest / p[:, 0]
        return p * x / y[:, None]

    def utility(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] + sum(ai * np.log1p(x[..., i]) for i, ai in enumerate(self.a, start=1))


@dataclass(frozen=True)
class Leontief:
    a: tuple = (1.0, 0.8, 1.5)
    kind = "leontief"

    def shares(self, p, y=None, habit=None):
        pa = np.asarray(p, dtype=float) * np.asarray(self.a)
        return pa / pa.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class StoneGeary:
    alpha: tuple = (0.5, 0.3, 0.2)
    gamma: tuple = (50.0, 30.0, 20.0)
    kind = "stone_geary"

    def __post_init__(self):
        if min(self.gamma) < 0:
            raise ValueError("subsistence quantities must be non-negative")

    def shares(self, p, y, habit=None):
        p = np.asarray(p, dtype=float)
        y = np.asarray(y, dtype=float)
        g = np.asarray(self.gamma)
        sub = (p * g).sum(axis=-1)
        if np.any(y <= sub):
            raise InfeasibleIncome("expenditure below the subsistence cost")
        spend = p * g + np.asarray(self.alpha) * (y - sub)[..., None]
        return spend / y[..., None]


@dataclass(frozen=True)
class EndogenousCES:
    """CES with taste shocks ``alpha_jt = alpha_j exp(xi_jt)`` that also shift prices."""

    alpha: tuple = (0.4, 0.4, 0.2)
    rho: float = 0.45
    xi_sd: float = 0.5
    price_floor: float = 0.1
    kind = "endogenous_ces"

    @property
    def sigma(self) -> float:
        return 1.0 / (1.0 - self.rho)

    def shares(self, p, y=None, habit=None, xi=None):
        """Shares at taste shock ``xi``; ``xi=None`` is the causal map at ``xi = 0``."""
        a = np.asarray(self.alpha)
        if xi is not None:
            a = a * np.exp(np.asarray(xi))
        return _ces_shares(a, self.sigma, np.asarray(p, dtype=float))


@dataclass(frozen=True)
class HabitCES:
    """``U_t = (sum a_i (x_i - theta * habit_i)^rho)^(1/rho)`` with an EWMA habit stock.

    The budget-constrained maximiser is the translated-CES (LES-like) rule
    ``x_i = theta*h_i + s_i(p) * (y - sum_j p_j theta h_j) / p_i`` with ``s``
    the static CES shares.
    """

    alpha: tuple = (0.4, 0.4, 0.2)
    rho: float = 0.45
    theta: float = 0.3
    delta: float = 0.7
    kind = "habit_ces"

    def __post_init__(self):
        if not 0 <= self.theta < 1:
            raise ValueError("theta must lie in [0, 1)")

    @property
    def sigma(self) -> float:
        return 1.0 / (1.0 - self.rho)

    def quantities(self, p, y, habit):
        p = np.asarray(p, dtype=float)
        y = np.asarray(y, dtype=float)
        base = self.theta * np.asarray(habit, dtype=float)
        free = y - (p * base).sum(axis=-1)
        if np.any(free <= 0):
            raise InfeasibleIncome("expenditure does not cover the habit floor")
        s = _ces_shares(np.asarray(self.alpha), self.sigma, p)
        return base + s * free[..., None] / p

    def shares(self, p, y, habit, allow_deficit: bool = False):
        """Budget shares of the habit allocation.

        With ``allow_deficit`` a row whose budget falls short of the habit floor
        is still evaluated by the same closed form (negative discretionary
        spending); rows that then leave the simplex still raise.
        """
        # written so that theta = 0 returns the static CES shares bit for bit
        p = np.asarray(p, dtype=float)
        y = np.asarray(y, dtype=float)[..., None]
        floor = p * self.theta * np.asarray(habit, dtype=float)
        free = y - floor.sum(axis=-1, keepdims=True)
        if np.any(free <= 0) and not allow_deficit:
            raise InfeasibleIncome("expenditure does not cover the habit floor")
        s = _ces_shares(np.asarray(self.alpha), self.sigma, p)
        w = floor / y + s * (free / y)
        if np.any(w < 0):
            raise InfeasibleIncome("habit floor pushes a share below zero")
        return w

    def utility(self, x, habit):
        adj = np.asarray(x) - self.theta * np.asarray(habit)
        return np.sum(np.asarray(self.alpha) * adj**self.rho, axis=-1) ** (1.0 / self.rho)


DGP = Union[CES, Quasilinear, Leontief, StoneGeary, EndogenousCES, HabitCES]

DGP_NAMES = {
    "ces": CES,
    "quasilinear": Quasilinear,
    "leontief": Leontief,
    "stone_geary": StoneGeary,
    "endogenous_ces": EndogenousCES,
    "habit_ces": HabitCES,
}


def make_dgp(name: str, **params) -> DGP:
    try:
        return DGP_NAMES[name.replace("-", "_").lower()](**params)
    except KeyError:
        raise ValueError(f"unknown DGP {name!r}; choose from {sorted(DGP_NAMES)}") from None


def oracle_shares(kind: DGP, p, y=None, habit=None) -> np.ndarray:
    """Closed-form Marshallian shares. Raises :class:`InfeasibleIncome` when needed."""
    if isinstance(kind, HabitCES):
        if habit is None:
            raise ValueError("habit DGP needs the habit stock")
        return kind.shares(p, y, habit)
    return kind.shares(p, y)


def generate_dataset(kind: DGP, cfg: Optional[SimConfig] = None) -> PanelDataset:
    cfg = cfg or SimConfig()
    rng = Stream(cfg.seed, f"dgp/{kind.kind}")
    N, G = cfg.N, cfg.G
    Z = rng.uniform(*cfg.z_bounds, size=(N, G))
    nu = rng.normal(0.0, cfg.price_noise_sd, size=(N, G))
    y = rng.uniform(*cfg.income_bounds, size=N)
    xi = habit = None
    redraws = 0

    if isinstance(kind, EndogenousCES):
        xi = rng.normal(0.0, kind.xi_sd, size=(N, G))
        p = np.maximum(Z + nu + xi, kind.price_floor)
        w = kind.shares(p, xi=xi)
    else:
        p = Z + nu
        if isinstance(kind, StoneGeary):
            # rejection loop; never triggers at the default bounds
            for _ in range(1000):
                bad = y <= (p * np.asarray(kind.gamma)).sum(axis=1)
                if not bad.any():
                    break
                k = int(bad.sum())
                redraws += k
                Z[bad] = rng.uniform(*cfg.z_bounds, size=(k, G))
                p[bad] = Z[bad] + rng.normal(0.0, cfg.price_noise_sd, size=(k, G))
                y[bad] = rng.uniform(*cfg.income_bounds, size=k)
            if redraws:
                log.info("Stone-Geary: redrew %d infeasible observations", redraws)
        if isinstance(kind, HabitCES):
            w, habit, k = _simulate_habit(kind, p, y, redraw=(rng, Z, cfg))
            redraws += k
        else:
            w = oracle_shares(kind, p, y)

    goods = GOODS if G == 3 else tuple(f"good{g}" for g in range(G))
    return PanelDataset(
        prices=p,
        income=y,
        shares=w,
        group=np.zeros(N, dtype=np.int64),
        time=np.arange(N),
        goods=goods,
        instruments=Z,
        habit=habit,
        xi=xi,
        meta={"dgp": kind, "seed": cfg.seed, "redraws": redraws, "config": cfg},
    )


def _simulate_habit(kind: HabitCES, p, y, habit0=None, redraw=None):
    """Evolve the habit stock along one sequence (arrays ``p``, ``y`` edited in place on redraw).

    A period whose expenditure does not cover the habit floor has its draws
    replaced when ``redraw=(stream, Z, cfg)`` is given; otherwise it raises.
    """
    N, G = p.shape
    w = np.empty((N, G))
    habit = np.empty((N, G))
    redraws = 0
    # warm start: period-1 static CES allocation
    h = _ces_shares(np.asarray(kind.alpha), kind.sigma, p[0]) * y[0] / p[0] if habit0 is None else habit0
    for t in range(N):
        habit[t] = h
        while redraw is not None and y[t] <= kind.theta * (p[t] @ h):
            rng, Z, cfg = redraw
            Z[t] = rng.uniform(*cfg.z_bounds, size=G)
            p[t] = Z[t] + rng.normal(0.0, cfg.price_noise_sd, size=G)
            y[t] = rng.uniform(*cfg.income_bounds)
            redraws += 1
        w[t] = kind.shares(p[t], y[t], h)
        x = w[t] * y[t] / p[t]
        h = kind.delta * h + (1.0 - kind.delta) * x
    return w, habit, redraws


def apply_price_shock(data: PanelDataset, good: int = 1, factor: float = 1.2, refreeze_habit: bool = True) -> PanelDataset:
    """Scale one good's price and re-solve the DGP shares.

    For the habit DGP the realised pre-shock habit path is held fixed unless
    ``refreeze_habit=False``, which re-simulates the habit recursion under the
    shocked prices. For the endogenous-price DGP the shocked shares are the
    causal map at ``xi = 0``, the object a corrected estimator targets.
    """
    if factor <= 0:
        raise ValueError("shock factor must be positive")
    kind = data.meta.get("dgp")
    p = data.prices.copy()
    p[:, good] *= factor
    out = data.copy()
    out.prices = p
    if kind is None:
        raise ValueError("dataset carries no DGP; cannot re-solve shares")
    if isinstance(kind, HabitCES):
        if refreeze_habit:
            deficit = kind.theta * (p * data.habit).sum(axis=1) >= data.income
            if deficit.any():
                log.warning("%d shocked rows fall short of the habit floor; closed form extrapolated", deficit.sum())
            out.meta["shock_deficit_rows"] = int(deficit.sum())
            out.shares = kind.shares(p, data.income, data.habit, allow_deficit=True)
        else:
            out.shares, out.habit, _ = _simulate_habit(kind, p, data.income, habit0=data.habit[0])
    elif isinstance(kind, EndogenousCES):
        out.shares = kind.shares(p)
    else:
        out.shares = oracle_shares(kind, p, data.income)
    out.meta["shock"] = (good, factor)
    return out


def ces_price_index(kind, p) -> np.ndarray:
    s = kind.sigma
    a = np.asarray(kind.alpha)
    return np.sum(a**s * np.asarray(p, dtype=float) ** (1.0 - s), axis=-1) ** (1.0 / (1.0 - s))


def ces_true_elasticities(kind, p, y=None) -> np.ndarray:
    """Quantity elasticities ``d ln x_i / d ln p_j`` at fixed expenditure."""
    w = kind.shares(np.asarray(p, dtype=float))
    G = len(w)
    eye = np.eye(G)
    return (1.0 - kind.sigma) * (eye - w[None, :]) - eye


def ces_true_cv(kind, p0, p1, y, measure: str = "marshallian", average: bool = True):
    """Welfare change of moving from ``p0`` to ``p1`` at expenditure ``y`` (loss < 0).

    ``measure="marshallian"`` is ``-y ln(P(p1)/P(p0))``, the exact value of
    the line integral of CES Marshallian demand, which is what the numerical
    CV of any estimated share system converges to. ``measure="hicksian"`` is
    the expenditure-function compensation ``y (1 - P(p1)/P(p0))``.
    """
    ratio = ces_price_index(kind, p1) / ces_price_index(kind, p0)
    y = np.asarray(y, dtype=float)
    if measure == "marshallian":
        cv = -y * np.log(ratio)
    elif measure == "hicksian":
        cv = y * (1.0 - ratio)
    else:
        raise ValueError(f"unknown measure {measure!r}")
    return float(np.mean(cv)) if average else cv
