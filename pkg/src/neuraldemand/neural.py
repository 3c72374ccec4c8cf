"""The neural demand system: state assembly, penalised KL training and share prediction."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import PanelDataset
from .features import build_window_features, habit_column
from .nn import autodiff as ad
from .nn import kernels
from .nn.autodiff import ContractError, GradientTape
from .nn.mlp import MLPWeights, init_weights, mlp_forward
from .nn.optim import AdamState, TrainingError, adam_step, clip_global_norm
from .rng import Stream

__all__ = [
    "CF_COLUMN",
    "LayoutError",
    "LossBreakdown",
    "NeuralDemandModel",
    "TrainConfig",
    "TrainResult",
    "Variant",
    "assemble_state",
    "compute_loss",
    "fit_neural",
    "predict_counterfactual_cf",
    "predict_shares",
    "train",
    "write_loss_history",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EMBED_DIM = 8
OBS_FLOOR = 1e-9
CF_COLUMN = "cf_resid"


class LayoutError(KeyError):
    """State columns missing or of the wrong width."""


@dataclass(frozen=True)
class Variant:
    """Which blocks enter the state vector.

    ``habit`` is the decay used to look up ``habit_<delta>`` in the dataset
    columns; ``window`` is the lag length (0 = none).
    """

    habit: Optional[float] = None
    window: int = 0
    fe: bool = False
    cf: bool = False

    @property
    def name(self) -> str:
        parts = ["static" if self.habit is None and not self.window else ("habit" if self.habit is not None else f"window{self.window}")]
        if self.fe:
            parts.append("fe")
        if self.cf:
            parts.append("cf")
        return "-".join(parts)


@dataclass
class TrainConfig:
    epochs: int = 10000
    batch_size: int = 256
    hidden: int = 256
    lr: float = 5e-4
    weight_decay: float = 1e-5
    clip: float = 1.0
    lambda_mono: float = 0.20
    lambda_slut: float = 0.10
    slutsky_start: int = 1000
    checkpoint_every: int = 50
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch size and width must be non-negative/positive")
        if min(self.lr, self.clip, self.checkpoint_every, self.fd_step) <= 0:
            raise ValueError("learning rate, clip, checkpoint cadence and FD step must be positive")
        if min(self.lambda_mono, self.lambda_slut, self.weight_decay) < 0:
            raise ValueError("penalty weights must be non-negative")

    @classmethod
    def panel(cls, habit: bool = False, **kw) -> "TrainConfig":
        return cls(epochs=4000 if habit else 3000, batch_size=512, **kw)


@dataclass
class NeuralDemandModel:
    weights: MLPWeights
    columns: list  # raw numeric state columns, in order
    goods: tuple
    variant: Variant = field(default_factory=Variant)
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None  # (n_groups, 8)
    group_ids: Optional[np.ndarray] = None  # raw ids for embedding rows
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = len(self.columns) + (EMBED_DIM if self.variant.fe else 0)
        if self.weights.d_in != d:
            raise LayoutError(f"network input width {self.weights.d_in} does not match layout width {d}")
        if self.mean is None:
            self.mean = np.zeros(len(self.columns))
        if self.scale is None:
            self.scale = np.ones(len(self.columns))

    @property
    def G(self) -> int:
        return len(self.goods)

    @property
    def d_state(self) -> int:
        return self.weights.d_in

    @property
    def cf_slots(self) -> list:
        return [k for k, c in enumerate(self.columns) if c.startswith(CF_COLUMN)]

    @property
    def extra_columns(self) -> list:
        """Columns beyond ``ln p, ln y`` that callers must supply as ``state`` (CF slots excluded)."""
        return [c for c in self.columns[self.G + 1 :] if not c.startswith(CF_COLUMN)]

    # -- forward -------------------------------------------------------------

    def embed_index(self, groups) -> np.ndarray:
        """Embedding row per group id; unseen ids map to a trailing all-zero row."""
        groups = np.asarray(groups).astype(np.int64)
        lookup = {int(g): k for k, g in enumerate(self.group_ids)}
        unseen = len(self.group_ids)
        return np.array([lookup.get(int(g), unseen) for g in groups], dtype=np.int64)

    def _embedding_table(self):
        return np.vstack([self.embedding, np.zeros((1, EMBED_DIM))])

    def logits_np(self, X: np.ndarray, groups=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise LayoutError(f"state width {X.shape[-1]} does not match layout {len(self.columns)}")
        h = (X - self.mean) / self.scale
        if self.variant.fe:
            if groups is None:
                raise LayoutError("fixed-effects model needs group ids")
            h = np.hstack([h, self._embedding_table()[self.embed_index(groups)]])
        layers = self.weights.layers
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            h = kernels.silu_forward(z)[0] if k < len(layers) - 1 else z
        return h

    def shares_np(self, X, groups=None) -> np.ndarray:
        return kernels.softmax_rows(np.ascontiguousarray(self.logits_np(X, groups)))

    def full_state(self, prices, income, state=None, residuals=None) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Raw state rows from prices, income and the extra block; CF slots get ``residuals`` or zeros."""
        p = np.atleast_2d(np.asarray(prices, dtype=float))
        n = len(p)
        y = np.broadcast_to(np.asarray(income, dtype=float), (n,))
        extra = self.extra_columns
        groups = None
        st = None if state is None else np.atleast_2d(np.asarray(state, dtype=float))
        if self.variant.fe:
            if st is None:
                raise LayoutError("fixed-effects model needs the group id as the last state column")
            groups = st[:, -1]
            st = st[:, :-1]
        if extra:
            if st is None or st.shape[1] != len(extra):
                raise LayoutError(f"state must supply columns {extra}")
        X = np.empty((n, len(self.columns)))
        X[:, : self.G] = np.log(p)
        X[:, self.G] = np.log(y)
        slots = [k for k, c in enumerate(self.columns) if k > self.G and not c.startswith(CF_COLUMN)]
        if slots:
            X[:, slots] = st
        cf = self.cf_slots
        if cf:
            X[:, cf] = 0.0 if residuals is None else residuals
        return X, groups

    def predict(self, prices, income, state=None) -> np.ndarray:
        """Shares for the metric/welfare protocol; CF models are evaluated at zero residual."""
        X, groups = self.full_state(prices, income, state)
        return self.shares_np(X, groups)

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "columns": self.columns,
                "goods": list(self.goods),
                "variant": asdict(self.variant),
                "mean": self.mean.tolist(),
                "scale": self.scale.tolist(),
                "layers": [[W.tolist(), b.tolist()] for W, b in self.weights.layers],
                "embedding": None if self.embedding is None else self.embedding.tolist(),
                "group_ids": None if self.group_ids is None else self.group_ids.tolist(),
                "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool, type(None)))},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NeuralDemandModel":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        w = MLPWeights([(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in d["layers"]])
        arr = lambda v, dt=float: None if v is None else np.array(v, dtype=dt)  # noqa: E731
        return cls(
            w,
            d["columns"],
            tuple(d["goods"]),
            Variant(**d["variant"]),
            arr(d["mean"]),
            arr(d["scale"]),
            arr(d["embedding"]),
            arr(d["group_ids"], np.int64),
            d["meta"],
        )

    def copy(self) -> "NeuralDemandModel":
        return NeuralDemandModel(
            self.weights.copy(),
            list(self.columns),
            self.goods,
            self.variant,
            self.mean.copy(),
            self.scale.copy(),
            None if self.embedding is None else self.embedding.copy(),
            None if self.group_ids is None else self.group_ids.copy(),
            dict(self.meta),
        )


def assemble_state(data: PanelDataset, variant: Variant, window_history: str = "log_quantity"):
    """Raw state matrix, column names and group ids for ``variant``.

    Column order: log prices, log income, habit block or lag window, CF
    residual block. The embedding block is added inside the model.
    """
    G = data.G
    blocks = [data.log_prices, data.log_income[:, None]]
    names = [f"lnp{g}" for g in range(G)] + ["lny"]
    if variant.habit is not None and variant.window:
        raise ValueError("choose either a habit stock or a lag window")
    if variant.habit is not None:
        key = habit_column(variant.habit)
        if key not in data.columns:
            raise LayoutError(f"missing habit column {key!r}; build it with build_habit_stock first")
        blocks.append(data.columns[key])
        names += [f"habit{g}" for g in range(G)]
    if variant.window:
        F = build_window_features(data, variant.window, history=window_history)
        blocks.append(F.values[:, G + 1 :])
        names += F.columns[G + 1 :]
    if variant.cf:
        if CF_COLUMN not in data.columns:
            raise LayoutError(f"missing {CF_COLUMN!r}; run the first stage first")
        blocks.append(data.columns[CF_COLUMN])
        names += [f"{CF_COLUMN}{g}" for g in range(G)]
    return np.hstack(blocks), names, data.group.copy()


def predict_shares(model: NeuralDemandModel, states, groups=None) -> np.ndarray:
    return model.shares_np(states, groups)


def predict_counterfactual_cf(model: NeuralDemandModel, prices, income, state=None) -> np.ndarray:
    if not model.variant.cf:
        raise ContractError("counterfactual at zero residual requires a control-function model")
    return model.predict(prices, income, state)


# ----------------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    kl: float
    mono: float
    slut: float
    total: float


def _tape_logits(model, params, tape, X, groups):
    """Standardise, append embeddings and run the MLP on the tape."""
    n_w = 2 * len(model.weights.layers)
    h = (tape.constant(X) - model.mean) * (1.0 / model.scale)
    if model.variant.fe:
        emb = ad.take_rows(params[n_w], groups)
        h = ad.concat([h, emb], axis=1)
    return mlp_forward(params[:n_w], h)


def compute_loss(model: NeuralDemandModel, params, tape: GradientTape, X, W, groups, cfg: TrainConfig, epoch: int):
    """Penalised KL for one batch. Returns ``(total_var, LossBreakdown)``.

    ``groups`` are embedding row indices (already mapped). Derivatives with
    respect to ``ln p`` and ``ln y`` are central differences stacked into the
    same forward pass; for CF models they are taken at zero residual.
    """
    B, G = W.shape
    h = cfg.fd_step
    slut_on = cfg.lambda_slut > 0 and epoch > cfg.slutsky_start
    mono_on = cfg.lambda_mono > 0
    idx = list(range(G)) + ([G] if slut_on else [])
    if not (mono_on or slut_on):
        idx = []
    Xp = X
    if model.variant.cf:
        Xp = X.copy()
        Xp[:, model.cf_slots] = 0.0
    # row blocks: [X (CF only)] + [Xp, Xp + h e_j, Xp - h e_j, ...]; without derivatives just [X]
    blocks = [X] if model.variant.cf or not idx else []
    if idx:
        blocks.append(Xp)
    for j in idx:
        up = Xp.copy()
        up[:, j] += h
        dn = Xp.copy()
        dn[:, j] -= h
        blocks += [up, dn]
    reps = len(blocks)
    Z = _tape_logits(model, params, tape, np.vstack(blocks), None if groups is None else np.tile(groups, reps))
    zk = ad.getitem(Z, slice(0, B))
    ls = ad.log_softmax(zk)
    Wf = np.clip(W, OBS_FLOOR, 1.0)
    Wf = Wf / Wf.sum(axis=1, keepdims=True)
    kl = ad.sum(ls * (-Wf)) * (1.0 / B) + float(np.sum(Wf * np.log(Wf)) / B)
    total = kl
    mono_v = slut_v = 0.0
    if idx:
        base_off = B if model.variant.cf else 0
        Sfull = ad.softmax(ad.getitem(Z, slice(base_off, None)))
        base = ad.getitem(Sfull, slice(0, B))
        derivs = []
        for k in range(len(idx)):
            lo = B + 2 * k * B
            derivs.append((ad.getitem(Sfull, slice(lo, lo + B)) - ad.getitem(Sfull, slice(lo + B, lo + 2 * B))) * (1.0 / (2 * h)))
        if mono_on:
            own = [ad.mean(ad.relu(ad.getitem(derivs[i], (slice(None), i)))) for i in range(G)]
            mono = own[0]
            for t in own[1:]:
                mono = mono + t
            mono = mono * (1.0 / G)
            mono_v = float(mono.value)
            total = total + mono * cfg.lambda_mono
        if slut_on:
            col = lambda v, i: ad.getitem(v, (slice(None), i))  # noqa: E731
            dy = derivs[G]
            acc = None
            for i in range(G):
                for j in range(i + 1, G):
                    # S_ij - S_ji with S_ij = dw_i/dlnp_j + w_j dw_i/dlny
                    a = col(derivs[j], i) + col(base, j) * col(dy, i) - col(derivs[i], j) - col(base, i) * col(dy, j)
                    sq = ad.square(a)
                    acc = sq if acc is None else acc + sq
            slut = ad.mean(acc) * 2.0
            slut_v = float(slut.value)
            total = total + slut * cfg.lambda_slut
    klv = float(kl.value)
    return total, LossBreakdown(klv, mono_v, slut_v, float(total.value))


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: NeuralDemandModel
    history: list  # (epoch, kl, mono, slut, total, checkpoint)
    best_epoch: int
    best_kl: float
    error: Optional[str] = None


def _full_kl(model, X, W, groups_raw):
    w = model.shares_np(X, groups_raw)
    Wf = np.clip(W, OBS_FLOOR, 1.0)
    Wf = Wf / Wf.sum(axis=1, keepdims=True)
    return float(np.mean(np.sum(Wf * (np.log(Wf) - np.log(np.maximum(w, 1e-300))), axis=1)))


def build_model(X, columns, goods, variant: Variant, groups=None, hidden=256, seed=0) -> NeuralDemandModel:
    """Fresh network with input moments taken from the training states ``X``."""
    d = X.shape[1] + (EMBED_DIM if variant.fe else 0)
    weights = init_weights(d, hidden, len(goods), seed=seed)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    emb = ids = None
    if variant.fe:
        ids = np.unique(np.asarray(groups).astype(np.int64))
        emb = Stream(seed, "embedding").normal(0.0, 0.01, size=(len(ids), EMBED_DIM))
    if variant.cf:
        # residuals are centred by construction; keep zero at the standardised origin
        for k, c in enumerate(columns):
            if c.startswith(CF_COLUMN):
                mean[k] = 0.0
    return NeuralDemandModel(weights, list(columns), tuple(goods), variant, mean, scale, emb, ids)


def train(model: NeuralDemandModel, X, W, groups, cfg: TrainConfig, seed: int = 0, log_every: int = 0) -> TrainResult:
    """Mini-batch Adam on the penalised KL; returns the best checkpoint by full-train KL."""
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    N = len(X)
    if N == 0:
        raise ValueError("empty training set")
    gidx = model.embed_index(groups) if model.variant.fe else None
    model = model.copy()
    arrays = model.weights.arrays() + ([model.embedding] if model.variant.fe else [])
    opt = AdamState.for_params(arrays, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = Stream(seed, "minibatch")
    best = model.copy()
    best_kl = _full_kl(model, X, W, groups)
    best_epoch = 0
    history = []
    error = None
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(N)
        sums = np.zeros(4)
        nb = 0
        try:
            for lo in range(0, N, cfg.batch_size):
                b = perm[lo : lo + cfg.batch_size]
                tape = GradientTape()
                params = [tape.variable(a) for a in arrays]
                total, parts = compute_loss(model, params, tape, X[b], W[b], None if gidx is None else gidx[b], cfg, epoch)
                if not np.isfinite(parts.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch}: {parts}")
                grads = clip_global_norm(tape.gradient(total, params), cfg.clip)
                adam_step(opt, arrays, grads)
                sums += (parts.kl, parts.mono, parts.slut, parts.total)
                nb += 1
        except TrainingError as exc:
            error = str(exc)
            log.error("training stopped: %s; returning best checkpoint (epoch %d)", exc, best_epoch)
            break
        flag = False
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            kl = _full_kl(model, X, W, groups)
            if np.isfinite(kl) and kl < best_kl:
                best, best_kl, best_epoch, flag = model.copy(), kl, epoch, True
        m = sums / max(nb, 1)
        history.append((epoch, m[0], m[1], m[2], m[3], flag))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d kl %.3e mono %.3e slut %.3e", epoch, m[0], m[1], m[2])
    best.meta.update(best_epoch=best_epoch, train_kl=best_kl, epochs=cfg.epochs, seed=seed)
    return TrainResult(best, history, best_epoch, best_kl, error)


def fit_neural(
    data: PanelDataset, variant: Variant, cfg: TrainConfig, seed: int = 0, init_seed: Optional[int] = None, window_history: str = "log_quantity"
) -> TrainResult:
    """Assemble states, initialise and train; ``init_seed`` defaults to ``seed``."""
    X, names, groups = assemble_state(data, variant, window_history)
    model = build_model(X, names, data.goods, variant, groups, cfg.hidden, seed if init_seed is None else init_seed)
    return train(model, X, data.shares, groups, cfg, seed)


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "kl", "mono", "slut", "total", "checkpoint"])
        for e, kl, mono, slut, tot, flag in history:
            w.writerow([e, f"{kl:.10e}", f"{mono:.10e}", f"{slut:.10e}", f"{tot:.10e}", int(flag)])
