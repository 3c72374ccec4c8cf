"""Multi-seed experiment orchestration, result tables, welfare, dashboard and decomposition analyses."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import benchmarks as bm
from .cfiv import build_hausman_instruments, first_stage
from .data import PanelDataset
from .dgp import CES, DGP_NAMES, GOODS, SimConfig, apply_price_shock, ces_true_elasticities, generate_dataset, make_dgp
from .features import HabitConfig, build_habit_stock, habit_column, placebo_shuffle
from .metrics import OracleModel, compensating_variation, elasticity_matrix_fd, fit_metrics, regularity_dashboard
from .neural import CF_COLUMN, TrainConfig, Variant, fit_neural, write_loss_history
from .panel import label_split, read_panel
from .plots import heatmap_svg, line_chart_svg
from .profile import DEFAULT_GRID, profile_delta, write_profile_csv

__all__ = [
    "EXPERIMENT_KINDS",
    "MODEL_LABELS",
    "DecompositionResult",
    "ExperimentConfig",
    "Fitted",
    "ResultTable",
    "RunReport",
    "decomposition_analysis",
    "fit_model",
    "load_config",
    "prepare_dataset",
    "run_experiment",
    "welfare_table",
]

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("sim-suite", "habit-suite", "profile", "panel-suite", "welfare", "dashboard", "decompose")

MODEL_LABELS = {
    "la-aids": "LA-AIDS",
    "blp": "BLP (IV)",
    "quaids": "QUAIDS",
    "series": "Series Estm.",
    "ld-shared": "LD (Shared)",
    "ld-goodspec": "LD (GoodSpec)",
    "ld-orth": "LD (Orth)",
    "nd-static": "ND (static)",
    "nd-static-noslut": "ND (static, no Slutsky penalty)",
    "nd-habit": "ND (habit)",
    "nd-cf": "ND (CF)",
    "nd-habit-cf": "ND (habit, CF)",
    "nd-placebo": "ND (placebo)",
    "nd-static-fe": "ND (static, FE)",
    "nd-habit-fe": "ND (habit, FE)",
}
BENCHMARKS = ("la-aids", "blp", "quaids", "series", "ld-shared", "ld-goodspec", "ld-orth")
SIM_MODELS = BENCHMARKS + ("nd-static", "nd-habit", "nd-cf", "nd-habit-cf")
HABIT_MODELS = SIM_MODELS + ("nd-placebo",)
PANEL_MODELS = ("la-aids", "quaids", "series", "ld-orth", "nd-static", "nd-habit", "nd-cf", "nd-habit-cf", "nd-static-fe", "nd-habit-fe")
BASELINE = "la-aids"


# --------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    kind: str = "sim-suite"
    dgp: str = "ces"
    models: tuple = ()
    seeds: tuple = (0, 1, 2, 3, 4)
    N: int = 800
    epochs: Optional[int] = None
    hidden: int = 256
    batch_size: Optional[int] = None
    lr: float = 5e-4
    weight_decay: float = 1e-5
    clip: float = 1.0
    lambda_mono: float = 0.20
    lambda_slut: float = 0.10
    slutsky_start: int = 1000
    checkpoint_every: int = 50
    habit_delta: float = 0.7
    habit_space: str = "auto"
    profile_grid: tuple = DEFAULT_GRID
    bootstrap: int = 50
    block: int = 50
    validation_fraction: float = 0.2
    shock_good: int = 1
    shock_factor: float = 1.2
    ld_steps: int = 20000
    cv_steps: int = 100
    cv_mode: str = "per_observation"
    panel_path: str = ""
    split_week: int = 351
    decompose_good: int = 0
    desk_scale: bool = False
    workers: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {EXPERIMENT_KINDS}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if not self.models:
            self.models = self.default_models()
        self.models = tuple(self.models)
        unknown = [m for m in self.models if m not in MODEL_LABELS]
        if unknown:
            raise ValueError(f"unknown model(s) {unknown}; choose from {sorted(MODEL_LABELS)}")
        self.profile_grid = tuple(float(g) for g in self.profile_grid)
        self.dgp = self.dgp.replace("-", "_")
        if self.dgp not in DGP_NAMES:
            raise ValueError(f"unknown DGP {self.dgp!r}; choose from {sorted(DGP_NAMES)}")

    def default_models(self) -> tuple:
        if self.kind == "panel-suite" or (self.panel_path and self.kind in ("welfare", "dashboard", "decompose")):
            return PANEL_MODELS
        if self.kind == "habit-suite":
            return HABIT_MODELS
        if self.kind == "dashboard":
            return ("nd-static", "nd-static-noslut", "la-aids")
        if self.kind == "decompose":
            return ("nd-static", "nd-habit")
        return SIM_MODELS

    @property
    def is_panel(self) -> bool:
        return bool(self.panel_path)

    def effective(self) -> "ExperimentConfig":
        """Apply desk scaling: epochs x 0.3 (activation epoch scaled alike) and at most three seeds."""
        if not self.desk_scale:
            return self
        base = self.epochs if self.epochs is not None else self._default_epochs(habit=False)
        scale = 0.3
        return replace(
            self,
            epochs=max(1, int(round(base * scale))),
            slutsky_start=max(0, int(round(self.slutsky_start * scale))),
            seeds=self.seeds[:3],
            desk_scale=False,
        )

    def _default_epochs(self, habit: bool) -> int:
        if self.is_panel:
            return 4000 if habit else 3000
        return 10000

    def train_config(self, habit: bool = False, lambda_slut: Optional[float] = None) -> TrainConfig:
        epochs = self.epochs if self.epochs is not None else self._default_epochs(habit)
        return TrainConfig(
            epochs=epochs,
            batch_size=self.batch_size or (512 if self.is_panel else 256),
            hidden=self.hidden,
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip=self.clip,
            lambda_mono=self.lambda_mono,
            lambda_slut=self.lambda_slut if lambda_slut is None else lambda_slut,
            slutsky_start=min(self.slutsky_start, epochs),
            checkpoint_every=self.checkpoint_every,
        )

    def space(self) -> str:
        if self.habit_space != "auto":
            return self.habit_space
        return "log_share" if self.is_panel else "quantity"

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        parts = [v.strip() for v in value.split(",") if v.strip()]
        if current and isinstance(current[0], (int, np.integer)) and not isinstance(current[0], bool):
            return tuple(int(v) for v in parts)
        if current and isinstance(current[0], (float, np.floating)):
            return tuple(float(v) for v in parts)
        return tuple(parts)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if current is None:
        return int(value) if value.strip().lstrip("-").isdigit() else value.strip()
    return value.strip()


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a sectioned key/value file; section names are cosmetic, keys are config fields."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    defaults = ExperimentConfig()
    names = {f.name.lower(): f.name for f in fields(ExperimentConfig)}  # the parser lower-cases keys
    kw = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            if key not in names:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            key = names[key]
            cur = getattr(defaults, key)
            if key == "models":
                cur = ("",)
            elif key == "seeds":
                cur = (0,)
            kw[key] = _coerce(value, cur)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kw)


# --------------------------------------------------------------------- tables


@dataclass
class ResultTable:
    """Rows of per-model metric cells, each a ``(mean, se)`` pair (``se`` is ``None`` for one seed)."""

    name: str
    columns: list
    rows: list = field(default_factory=list)  # (label, {column: (mean, se)})
    meta: dict = field(default_factory=dict)
    with_se: bool = True

    def add(self, label: str, cells: dict) -> None:
        self.rows.append((label, cells))

    def header(self) -> list:
        out = ["model"]
        for c in self.columns:
            out.append(c)
            if self.with_se:
                out.append(f"{c}_se")
        return out

    def _cells(self, cells) -> list:
        out = []
        for c in self.columns:
            m, s = cells.get(c, (math.nan, None))
            out.append(_num(m))
            if self.with_se:
                out.append(_num(s))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for label, cells in self.rows:
                w.writerow([label, *self._cells(cells)])

    @classmethod
    def from_csv(cls, path, name: Optional[str] = None) -> "ResultTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        with_se = any(h.endswith("_se") for h in header[1:])
        cols = [h for h in header[1:] if not (with_se and h.endswith("_se"))]
        t = cls(name or Path(path).stem, cols, with_se=with_se)
        for r in rows[1:]:
            vals = [float(v) if v not in ("", "nan") else math.nan for v in r[1:]]
            cells = {}
            step = 2 if with_se else 1
            for k, c in enumerate(cols):
                m = vals[step * k]
                s = vals[step * k + 1] if with_se else None
                cells[c] = (m, None if s is None or math.isnan(s) else s)
            t.add(r[0], cells)
        return t

    def to_markdown(self, path=None) -> str:
        head = ["Model", *self.columns]
        body = []
        for label, cells in self.rows:
            row = [label]
            for c in self.columns:
                m, s = cells.get(c, (math.nan, None))
                row.append(_num(m, False) if (s is None or not self.with_se) else f"{_num(m, False)} ± {_num(s, False)}")
            body.append(row)
        widths = [max(len(str(r[k])) for r in [head, *body]) for k in range(len(head))]
        fmt = lambda r: "| " + " | ".join(str(v).ljust(w) for v, w in zip(r, widths)) + " |"  # noqa: E731
        lines = [fmt(head), "|" + "|".join("-" * (w + 2) for w in widths) + "|", *(fmt(r) for r in body)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _num(v, exact: bool = True) -> str:
    """CSV cells are exact (shortest round-trip repr); markdown cells are rounded for reading."""
    if v is None:
        return ""
    v = float(v) + 0.0  # folds -0.0 into 0.0
    if math.isnan(v):
        return "nan"
    return repr(v) if exact else f"{v:.6g}"


def _mean_se(values) -> tuple:
    a = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if a.size == 0:
        return (math.nan, None)
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else None
    return (float(a.mean()), se)


# ----------------------------------------------------------------- model zoo


@dataclass
class Fitted:
    key: str
    model: object
    state: Callable[[PanelDataset], Optional[np.ndarray]]
    extra: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return MODEL_LABELS[self.key]

    def predict(self, data: PanelDataset) -> np.ndarray:
        return np.asarray(self.model.predict(data.prices, data.income, self.state(data)))


PLACEBO_PREFIX = "placebo_"


def prepare_dataset(data: PanelDataset, cfg: ExperimentConfig, seed: int, train_mask=None) -> PanelDataset:
    """Attach the habit stock, its placebo shuffle and the first-stage residual column.

    On panels the habit start value is the training-row mean and the
    instruments are leave-one-store-out means; rows without a valid
    instrument get a zero residual.
    """
    d = build_habit_stock(data, HabitConfig(cfg.habit_delta, space=cfg.space()), init_rows=train_mask)
    hc = habit_column(cfg.habit_delta)
    d.columns[PLACEBO_PREFIX + hc] = placebo_shuffle({hc: d.columns[hc]}, seed, d.split)[hc]
    if d.instruments is not None:
        Zi = np.log(d.instruments)
        valid = np.ones(len(d), dtype=bool)
    else:
        Zi, valid = build_hausman_instruments(d)
        d.instruments = np.where(valid[:, None], Zi, 0.0)
    rows = valid if train_mask is None else valid & np.asarray(train_mask, dtype=bool)
    fs = first_stage(d.log_prices[rows], Zi[rows])
    resid = np.zeros_like(d.log_prices)
    resid[valid] = fs.residuals_for(d.log_prices[valid], Zi[valid])
    d.columns[CF_COLUMN] = resid
    d.meta["first_stage"] = fs
    return d


def _nd_variant(key: str, delta: float) -> Variant:
    habit = delta if ("habit" in key or "placebo" in key) else None
    return Variant(habit=habit, cf=key.endswith("-cf"), fe=key.endswith("-fe"))


def fit_model(key: str, train: PanelDataset, cfg: ExperimentConfig, seed: int) -> Fitted:
    """Fit one registered model on a prepared training set."""
    hc = habit_column(cfg.habit_delta)
    no_state = lambda d: None  # noqa: E731
    if key == "la-aids":
        return Fitted(key, bm.fit_la_aids(train), no_state)
    if key == "quaids":
        return Fitted(key, bm.fit_quaids(train), no_state)
    if key == "series":
        return Fitted(key, bm.fit_series(train), no_state)
    if key == "blp":
        return Fitted(key, bm.fit_blp_logit_iv(train), no_state)
    if key.startswith("ld-"):
        return Fitted(key, bm.fit_linear_demand(train, key[3:], steps=cfg.ld_steps), no_state)
    v = _nd_variant(key, cfg.habit_delta)
    col = (PLACEBO_PREFIX + hc) if key == "nd-placebo" else hc
    data = train
    if key == "nd-placebo":
        data = train.copy()
        data.columns[hc] = train.columns[col]
    tcfg = cfg.train_config(habit=v.habit is not None, lambda_slut=0.0 if key == "nd-static-noslut" else None)
    res = fit_neural(data, v, tcfg, seed=seed)
    if res.error:
        log.warning("%s seed %d: %s", key, seed, res.error)

    def state(d: PanelDataset):
        blocks = []
        if v.habit is not None:
            blocks.append(d.columns[col])
        if v.fe:
            blocks.append(d.group[:, None].astype(float))
        return np.hstack(blocks) if blocks else None

    return Fitted(key, res.model, state, {"history": res.history, "best_epoch": res.best_epoch, "error": res.error})


# --------------------------------------------------------------- evaluation


def _mean_state(fitted: Fitted, data: PanelDataset):
    s = fitted.state(data)
    if s is None:
        return None
    m = s.mean(axis=0)
    if fitted.key.endswith("-fe"):
        m[-1] = -1.0  # unseen store id: zero embedding, the population-average model
    return m


def _oracle_state(data: PanelDataset):
    return None if data.habit is None else data.habit


def _elasticities(model, p, y, state) -> np.ndarray:
    try:
        return elasticity_matrix_fd(model, p, y, state).values
    except ZeroDivisionError:
        return np.full((len(p), len(p)), np.nan)


@dataclass
class SeedResult:
    seed: int
    metrics: dict = field(default_factory=dict)  # key -> dict
    failures: dict = field(default_factory=dict)  # key -> message
    truth: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)


def _sim_eval_sets(cfg: ExperimentConfig, seed: int):
    kind = make_dgp(cfg.dgp)
    raw = generate_dataset(kind, SimConfig(N=cfg.N, seed=seed, shock_good=cfg.shock_good, shock_factor=cfg.shock_factor))
    data = prepare_dataset(raw, cfg, seed)
    shocked = _evaluation_placebo(apply_price_shock(data, cfg.shock_good, cfg.shock_factor), cfg)
    return kind, data, data, shocked


def _evaluation_placebo(data: PanelDataset, cfg: ExperimentConfig) -> PanelDataset:
    """Copy with the placebo history drawn from a permutation independent of the training one.

    Simulation suites evaluate on the training rows, where reusing the
    training permutation turns the shuffled history into a row identifier
    the network can memorise.
    """
    hc = habit_column(cfg.habit_delta)
    out = data.copy()
    labels = np.full(len(out), "test", dtype=object)
    out.columns[PLACEBO_PREFIX + hc] = placebo_shuffle({hc: out.columns[hc]}, int(out.meta.get("seed", 0)), labels)[hc]
    return out


def _panel_eval_sets(cfg: ExperimentConfig, seed: int):
    panel = label_split(read_panel(cfg.panel_path), cfg.split_week)
    train_mask = panel.split == "train"
    data = prepare_dataset(panel, cfg, seed, train_mask=train_mask)
    train = data.subset(np.flatnonzero(train_mask))
    test = data.subset(np.flatnonzero(~train_mask))
    return None, data, train, test


def _curve_grid(data: PanelDataset, good: int, n: int = 25) -> np.ndarray:
    lo, hi = np.quantile(data.prices[:, good], [0.05, 0.95])
    return np.linspace(lo, hi, n)


def _demand_curve(fitted, data: PanelDataset, good: int, grid) -> np.ndarray:
    """Mean predicted shares as the price of ``good`` moves along ``grid`` (others at observed values)."""
    out = np.empty((len(grid), data.G))
    st = fitted.state(data)
    for k, v in enumerate(grid):
        p = data.prices.copy()
        p[:, good] = v
        out[k] = np.asarray(fitted.model.predict(p, data.income, st)).mean(axis=0)
    return out


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Fresh data and fresh fits for one seed; failures are recorded per model."""
    res = SeedResult(seed)
    if cfg.is_panel:
        kind, data, train, evalset = _panel_eval_sets(cfg, seed)
    else:
        kind, data, train, evalset = _sim_eval_sets(cfg, seed)
    p_mean = train.prices.mean(axis=0)
    y_mean = float(train.income.mean())
    grid = _curve_grid(train, cfg.shock_good)
    # welfare: shock the evaluation-period prices (panel: test rows, income fixed at pre-shock value)
    base = _evaluation_placebo(train, cfg) if not cfg.is_panel else evalset
    p1 = base.prices.copy()
    p1[:, cfg.shock_good] *= cfg.shock_factor
    if kind is not None:
        oracle = OracleModel(kind)
        ost = _oracle_state(base)
        if isinstance(kind, CES):
            E = ces_true_elasticities(kind, p_mean)
        else:
            E = _elasticities(oracle, p_mean, y_mean, None if ost is None else ost.mean(axis=0))
        res.truth = {
            "E": E,
            "cv": compensating_variation(oracle, base.prices, p1, base.income, ost, steps=cfg.cv_steps, mode=cfg.cv_mode),
        }
        res.curves["Ground Truth"] = np.array(
            [np.asarray(oracle.predict(np.where(np.arange(base.G) == cfg.shock_good, v, base.prices), base.income, ost)).mean(axis=0) for v in grid]
        )
    res.curves["_grid"] = grid
    for key in cfg.models:
        try:
            f = fit_model(key, train, cfg, seed)
            w = f.predict(evalset)
            # benchmarks can leave the simplex; KL uses clipped, renormalised shares
            w_kl = bm.predict_benchmark(f.model, evalset, for_kl=True) if key in BENCHMARKS else w
            rmse, mae, _ = fit_metrics(w, evalset.shares)
            _, _, kl = fit_metrics(w_kl, evalset.shares)
            ms = _mean_state(f, train)
            E = _elasticities(f.model, p_mean, y_mean, ms)
            st = f.state(base)
            cv = compensating_variation(f.model, base.prices, p1, base.income, st, steps=cfg.cv_steps, mode=cfg.cv_mode)
            res.metrics[key] = dict(rmse=rmse, mae=mae, kl=kl, E=E, cv=cv)
            res.curves[f.label] = _demand_curve(f, base, cfg.shock_good, grid)
            if "history" in f.extra:
                res.histories[key] = f.extra["history"]
        except Exception as exc:  # noqa: BLE001 - a failed cell must not sink the run
            log.error("model %s seed %d failed: %s", key, seed, exc)
            res.failures[key] = f"{type(exc).__name__}: {exc}"
    return res


@dataclass
class RunReport:
    tables: dict
    files: list
    failures: list  # (seed, model, message)
    config_hash: str

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def _run_seeds(cfg: ExperimentConfig, fn=run_seed) -> list:
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            return list(ex.map(fn, [cfg] * len(cfg.seeds), cfg.seeds))
    return [fn(cfg, s) for s in cfg.seeds]


def _accuracy_table(cfg, results, name) -> ResultTable:
    multi = len(results) > 1
    t = ResultTable(name, ["rmse", "mae", "kl", "rmse_red_pct"], with_se=multi)
    base = _mean_se([r.metrics.get(BASELINE, {}).get("rmse") for r in results])[0]
    for key in cfg.models:
        vals = [r.metrics[key] for r in results if key in r.metrics]
        if not vals:
            t.add(MODEL_LABELS[key], {})
            continue
        cells = {m: _mean_se([v[m] for v in vals]) for m in ("rmse", "mae", "kl")}
        red = 100.0 * (1.0 - cells["rmse"][0] / base) if np.isfinite(base) else math.nan
        cells["rmse_red_pct"] = (red, None)
        t.add(MODEL_LABELS[key], cells)
    return t


def _elasticity_table(cfg, results, name, goods) -> ResultTable:
    G = len(goods)
    cols = [f"e{i}{i}" for i in range(G)]
    t = ResultTable(name, cols, with_se=len(results) > 1)
    for key in cfg.models:
        Es = [r.metrics[key]["E"] for r in results if key in r.metrics]
        t.add(MODEL_LABELS[key], {f"e{i}{i}": _mean_se([E[i, i] for E in Es]) for i in range(G)} if Es else {})
    if results and results[0].truth:
        t.add("Ground Truth", {f"e{i}{i}": _mean_se([r.truth["E"][i, i] for r in results]) for i in range(G)})
    return t


def welfare_table(cfg: ExperimentConfig, results: Sequence[SeedResult], name: str = "welfare") -> ResultTable:
    """CV per model with percentage error against the oracle (simulations) or against ND (static) (panels)."""
    multi = len(results) > 1
    sim = bool(results and results[0].truth)
    col = "err_pct" if sim else "vs_static_pct"
    t = ResultTable(name, ["cv", col], with_se=multi)
    ref_key = "nd-static"
    for key in cfg.models:
        pairs = []
        for r in results:
            if key not in r.metrics:
                continue
            cv = r.metrics[key]["cv"]
            ref = r.truth["cv"] if sim else r.metrics.get(ref_key, {}).get("cv", math.nan)
            pairs.append((cv, 100.0 * abs(cv - ref) / abs(ref) if sim else 100.0 * (cv - ref) / abs(ref)))
        if not pairs:
            t.add(MODEL_LABELS[key], {})
            continue
        t.add(MODEL_LABELS[key], {"cv": _mean_se([p[0] for p in pairs]), col: _mean_se([p[1] for p in pairs])})
    if sim:
        t.add("Ground Truth", {"cv": _mean_se([r.truth["cv"] for r in results]), col: (math.nan, None)})
    return t


def _write_table(t: ResultTable, out: Path, files: list) -> None:
    t.meta.setdefault("name", t.name)
    p = out / f"{t.name}.csv"
    t.to_csv(p)
    t.to_markdown(out / f"{t.name}.md")
    files += [p, out / f"{t.name}.md"]


def _write_curves(cfg, results, out: Path, files: list, goods) -> None:
    labels = [k for k in results[0].curves if k != "_grid"]
    grid = results[0].curves["_grid"]
    path = out / "demand_curves.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["price", "model", "good", "mean", "se", "sd"])
        for lab in labels:
            stack = np.array([r.curves[lab] for r in results if lab in r.curves])
            if stack.size == 0:
                continue
            m = stack.mean(axis=0)
            sd = stack.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros_like(m)
            se = sd / math.sqrt(len(stack))
            for k, pv in enumerate(grid):
                for g in range(m.shape[1]):
                    w.writerow([_num(pv), lab, goods[g], _num(m[k, g]), _num(se[k, g]), _num(sd[k, g])])
    files.append(path)
    for g, good in enumerate(goods):
        series = {}
        bands = {}
        for lab in labels:
            stack = np.array([r.curves[lab][:, g] for r in results if lab in r.curves])
            if stack.size == 0:
                continue
            series[lab] = stack.mean(axis=0)
            se = stack.std(axis=0, ddof=1) / math.sqrt(len(stack)) if len(stack) > 1 else np.zeros(len(grid))
            bands[lab] = (series[lab] - se, series[lab] + se)
        svg = out / f"demand_curve_{good}.svg"
        svg.write_text(line_chart_svg(grid, series, f"Budget share of {good}", bands, xlabel=f"price of {goods[cfg.shock_good]}", ylabel="share"), encoding="utf-8")
        files.append(svg)


def _write_heatmaps(cfg, results, out: Path, files: list, goods) -> None:
    path = out / "elasticity_heatmap.csv"
    mats = {}
    for key in cfg.models:
        Es = [r.metrics[key]["E"] for r in results if key in r.metrics]
        if Es:
            mats[MODEL_LABELS[key]] = np.mean(Es, axis=0)
    if results[0].truth:
        mats["Ground Truth"] = np.mean([r.truth["E"] for r in results], axis=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "good", *goods])
        for lab, E in mats.items():
            for i, g in enumerate(goods):
                w.writerow([lab, g, *(_num(v) for v in E[i])])
    files.append(path)
    for k, (lab, E) in enumerate(mats.items()):
        svg = out / f"elasticity_heatmap_{k:02d}.svg"
        svg.write_text(heatmap_svg(E, goods, goods, lab), encoding="utf-8")
        files.append(svg)


def _suite(cfg: ExperimentConfig, out: Path) -> RunReport:
    results = _run_seeds(cfg)
    goods = _goods(cfg)
    tag = "panel" if cfg.is_panel else cfg.dgp.replace("_", "-")
    files: list = []
    tables = {}
    failures = [(r.seed, k, msg) for r in results for k, msg in sorted(r.failures.items())]
    kinds = {"sim-suite": ("accuracy", "elasticities", "welfare"), "habit-suite": ("accuracy", "elasticities", "welfare")}
    kinds["panel-suite"] = kinds["sim-suite"]
    kinds["welfare"] = ("welfare",)
    for what in kinds[cfg.kind]:
        if what == "accuracy":
            t = _accuracy_table(cfg, results, f"accuracy_{tag}")
        elif what == "elasticities":
            t = _elasticity_table(cfg, results, f"elasticities_{tag}", goods)
        else:
            t = welfare_table(cfg, results, f"welfare_{tag}")
        tables[t.name] = t
        _write_table(t, out, files)
    if cfg.kind != "welfare":
        _write_curves(cfg, results, out, files, goods)
        _write_heatmaps(cfg, results, out, files, goods)
        for r in results:
            for key, hist in sorted(r.histories.items()):
                p = out / f"loss_{key}_seed{r.seed}.csv"
                write_loss_history(hist, p)
                files.append(p)
    return RunReport(tables, files, failures, cfg.config_hash())


def _goods(cfg) -> tuple:
    if cfg.is_panel:
        return read_panel(cfg.panel_path).goods
    return GOODS


# ------------------------------------------------------------------ profile


def _profile_seed(cfg: ExperimentConfig, seed: int):
    if cfg.is_panel:
        data = label_split(read_panel(cfg.panel_path), cfg.split_week)
        test = data.split == "test"
    else:
        data = generate_dataset(make_dgp(cfg.dgp), SimConfig(N=cfg.N, seed=seed))
        test = np.arange(len(data)) >= int(round((1.0 - cfg.validation_fraction) * len(data)))
    return profile_delta(
        data, cfg.profile_grid, cfg.train_config(habit=True), seed=seed, test_mask=test, space=cfg.space(), B=cfg.bootstrap, block=cfg.block
    )


def _profile(cfg: ExperimentConfig, out: Path) -> RunReport:
    profiles = _run_seeds(cfg, _profile_seed)
    files: list = []
    for s, pr in zip(cfg.seeds, profiles):
        p = out / f"profile_seed{s}.csv"
        write_profile_csv(pr, p)
        files.append(p)
    true_delta = getattr(make_dgp(cfg.dgp), "delta", None) if not cfg.is_panel else None
    rows = []
    for pr in profiles:
        lo, hi = pr.identified_set(2.0)
        rows.append((pr.delta_hat, lo, hi, hi - lo, None if true_delta is None else float(lo <= true_delta <= hi)))
    multi = len(profiles) > 1
    t = ResultTable("delta_identification", ["value"], with_se=multi)
    if true_delta is not None:
        t.add("true delta", {"value": (float(true_delta), None)})
    t.add("delta hat", {"value": _mean_se([r[0] for r in rows])})
    t.add("IS lo (c=2)", {"value": (float(np.mean([r[1] for r in rows])), None)})
    t.add("IS hi (c=2)", {"value": (float(np.mean([r[2] for r in rows])), None)})
    t.add("IS width", {"value": _mean_se([r[3] for r in rows])})
    if true_delta is not None:
        t.add("coverage pct", {"value": (100.0 * float(np.mean([r[4] for r in rows])), None)})
    _write_table(t, out, files)
    # plot data: mean profile with SE and SD bands across seeds
    grid = profiles[0].grid
    K = np.array([pr.kl for pr in profiles])
    m = np.nanmean(K, axis=0)
    sd = np.nanstd(K, axis=0, ddof=1) if len(K) > 1 else np.nanmean([pr.se for pr in profiles], axis=0)
    se = sd / math.sqrt(len(K)) if len(K) > 1 else sd
    path = out / "profile_kl.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "mean_kl", "se", "sd"])
        for k, d in enumerate(grid):
            w.writerow([_num(d), _num(m[k]), _num(se[k]), _num(sd[k])])
    files.append(path)
    dhat = float(grid[np.nanargmin(m)])
    lo = float(np.mean([r[1] for r in rows]))
    hi = float(np.mean([r[2] for r in rows]))
    svg = out / "profile_kl.svg"
    vl = [dhat] + ([float(true_delta)] if true_delta is not None else [])
    svg.write_text(line_chart_svg(grid, {"test KL": m}, "Profile KL criterion", {"test KL": (m - se, m + se)}, vl, (lo, hi), "delta", "KL"), encoding="utf-8")
    files.append(svg)
    return RunReport({t.name: t}, files, [], cfg.config_hash())


# ---------------------------------------------------------------- dashboard


def _dashboard(cfg: ExperimentConfig, out: Path) -> RunReport:
    cols = ["d_add_max", "d_sym_mean", "lambda_max_mean", "pr_positive_curvature", "d_curv_mean", "d_hom_mean"]
    per_seed = {}
    failures = []
    for seed in cfg.seeds:
        if cfg.is_panel:
            kind, data, train, evalset = _panel_eval_sets(cfg, seed)
        else:
            kind, data, train, evalset = _sim_eval_sets(cfg, seed)
            evalset = train
        entries = []
        if kind is not None:
            entries.append(("Oracle", OracleModel(kind), _oracle_state(evalset)))
        for key in cfg.models:
            try:
                f = fit_model(key, train, cfg, seed)
                entries.append((MODEL_LABELS[key], f.model, f.state(evalset)))
            except Exception as exc:  # noqa: BLE001
                failures.append((seed, key, f"{type(exc).__name__}: {exc}"))
        for label, model, st in entries:
            rep, _ = regularity_dashboard(model, evalset.prices, evalset.income, st)
            per_seed.setdefault(label, []).append(rep.to_row())
    t = ResultTable("dashboard", cols, with_se=len(cfg.seeds) > 1)
    for label, reps in per_seed.items():
        t.add(label, {c: _mean_se([r[c] for r in reps]) for c in cols})
    files: list = []
    _write_table(t, out, files)
    return RunReport({t.name: t}, files, failures, cfg.config_hash())


# ------------------------------------------------------------ decomposition


@dataclass
class DecompositionResult:
    grid: np.ndarray
    static: np.ndarray  # conditional-mean share of the chosen good (static model)
    fixed: np.ndarray  # habit model at the mean state
    conditional: np.ndarray  # habit model at E[state | price bin]
    spearman: float  # rank correlation of observed shares of the first and last good

    @property
    def gap(self) -> np.ndarray:
        return self.conditional - self.fixed

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["price", "static", "habit_fixed_state", "habit_conditional_state", "gap"])
            for k, p in enumerate(self.grid):
                w.writerow([_num(p), _num(self.static[k]), _num(self.fixed[k]), _num(self.conditional[k]), _num(self.gap[k])])


def _bin_state_means(price: np.ndarray, state: np.ndarray, n_bins: int):
    """Quantile bins of ``price`` with the mean state per bin; empty bins borrow the nearest non-empty neighbour."""
    edges = np.quantile(price, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, price, side="right") - 1, 0, n_bins - 1)
    means = np.full((n_bins, state.shape[1]), np.nan)
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            means[b] = state[sel].mean(axis=0)
    filled = np.flatnonzero(~np.isnan(means[:, 0]))
    for b in range(n_bins):
        if np.isnan(means[b, 0]):
            means[b] = means[filled[np.argmin(np.abs(filled - b))]]
    return edges, means


def decomposition_analysis(static, habit, data: PanelDataset, good: int, grid=None, n_bins: int = 20, state_fn=None) -> DecompositionResult:
    """Structural price effect versus state-segment correlation for the share of ``good``.

    ``static`` and ``habit`` expose ``predict(prices, income, state)``;
    ``state_fn(data)`` returns the habit model's state (default: the
    ``state`` attribute of a :class:`Fitted`, else ``data.habit``).
    """
    if state_fn is None:
        state_fn = habit.state if isinstance(habit, Fitted) else (lambda d: d.habit)
    hm = habit.model if isinstance(habit, Fitted) else habit
    sm = static.model if isinstance(static, Fitted) else static
    st = np.asarray(state_fn(data), dtype=float)
    grid = _curve_grid(data, good) if grid is None else np.asarray(grid, dtype=float)
    edges, means = _bin_state_means(data.prices[:, good], st, n_bins)
    fixed_state = st.mean(axis=0)
    s_curve, f_curve, c_curve = (np.empty(len(grid)) for _ in range(3))
    for k, v in enumerate(grid):
        p = data.prices.copy()
        p[:, good] = v
        s_curve[k] = np.asarray(sm.predict(p, data.income, None))[:, good].mean()
        f_curve[k] = np.asarray(hm.predict(p, data.income, np.broadcast_to(fixed_state, st.shape)))[:, good].mean()
        b = int(np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_bins - 1))
        c_curve[k] = np.asarray(hm.predict(p, data.income, np.broadcast_to(means[b], st.shape)))[:, good].mean()
    rho = float(spearmanr(data.shares[:, 0], data.shares[:, -1]).statistic)
    return DecompositionResult(grid, s_curve, f_curve, c_curve, rho)


def _decompose(cfg: ExperimentConfig, out: Path) -> RunReport:
    files: list = []
    failures = []
    cfg = replace(cfg, models=("nd-static", "nd-habit"))
    stacks = []
    rhos = []
    for seed in cfg.seeds:
        if cfg.is_panel:
            _, data, train, evalset = _panel_eval_sets(cfg, seed)
        else:
            _, data, train, evalset = _sim_eval_sets(cfg, seed)
            evalset = train
        try:
            s = fit_model("nd-static", train, cfg, seed)
            h = fit_model("nd-habit", train, cfg, seed)
        except Exception as exc:  # noqa: BLE001
            failures.append((seed, "decompose", str(exc)))
            continue
        grid = _curve_grid(train, cfg.decompose_good)
        d = decomposition_analysis(s, h, evalset, cfg.decompose_good, grid)
        p = out / f"decomposition_seed{seed}.csv"
        d.to_csv(p)
        files.append(p)
        stacks.append(d)
        rhos.append(d.spearman)
    t = ResultTable("decomposition", ["max_abs_gap", "mean_gap", "spearman_w0_wlast"], with_se=len(stacks) > 1)
    if stacks:
        t.add(
            "ND (habit) vs ND (static)",
            {
                "max_abs_gap": _mean_se([np.abs(d.gap).max() for d in stacks]),
                "mean_gap": _mean_se([d.gap.mean() for d in stacks]),
                "spearman_w0_wlast": _mean_se(rhos),
            },
        )
        d0 = stacks[0]
        svg = out / "decomposition.svg"
        svg.write_text(
            line_chart_svg(
                d0.grid,
                {"static": np.mean([d.static for d in stacks], 0), "habit, fixed state": np.mean([d.fixed for d in stacks], 0), "habit, conditional state": np.mean([d.conditional for d in stacks], 0)},
                "Structural price effect vs state-segment correlation",
                {"habit, conditional state": (np.mean([d.fixed for d in stacks], 0), np.mean([d.conditional for d in stacks], 0))},
                xlabel="own price",
                ylabel="share",
            ),
            encoding="utf-8",
        )
        files.append(svg)
    _write_table(t, out, files)
    return RunReport({t.name: t}, files, failures, cfg.config_hash())


# ------------------------------------------------------------------ driver


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Run ``cfg`` and write its tables and plot data under ``cfg.out`` (created if needed)."""
    cfg = cfg.effective()
    if cfg.kind == "habit-suite" and cfg.dgp == "ces":
        cfg = replace(cfg, dgp="habit_ces")
    if cfg.kind == "panel-suite" and not cfg.panel_path:
        raise ValueError("panel-suite needs panel_path")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind in ("sim-suite", "habit-suite", "panel-suite", "welfare"):
        rep = _suite(cfg, out)
    elif cfg.kind == "profile":
        rep = _profile(cfg, out)
    elif cfg.kind == "dashboard":
        rep = _dashboard(cfg, out)
    else:
        rep = _decompose(cfg, out)
    prov = out / "provenance.json"
    prov.write_text(
        json.dumps({"config_hash": rep.config_hash, "seeds": list(cfg.seeds), "config": asdict(cfg), "failures": rep.failures}, indent=1, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )
    rep.files.append(prov)
    if rep.failures:
        (out / "failures.csv").write_text("seed,model,message\n" + "".join(f"{s},{m},{json.dumps(msg)}\n" for s, m, msg in rep.failures), encoding="utf-8")
    return rep

