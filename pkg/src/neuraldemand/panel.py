"""Scanner-panel ingestion: UPC rows to a balanced three-good store-week panel.

Input CSV columns: ``store,week,upc,price,move,tablets,class``. Revenue of a
row is ``price * move``; its unit price is standardised to a 100-tablet
equivalent, ``price * 100 / tablets``. Within each store-week-good cell the
unit price is the revenue-weighted mean, shares are revenue ratios and the
income proxy is ``max(total revenue, 1) / 100``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import PanelDataset

__all__ = [
    "CLASSES",
    "FORMAT_TAG",
    "IngestReport",
    "SchemaError",
    "UpcRecord",
    "brand_classes",
    "build_panel",
    "classify_description",
    "ingest_upc_csv",
    "label_split",
    "load_classification",
    "read_panel",
    "temporal_split",
    "write_panel",
]

log = logging.getLogger(__name__)

CLASSES = ("aspirin", "acetaminophen", "ibuprofen")
UPC_COLUMNS = ("store", "week", "upc", "price", "move", "tablets", "class")
FORMAT_TAG = "#format=neuraldemand-panel/1"
SPLIT_WEEK = 351


class SchemaError(ValueError):
    """A required CSV column is missing or the file format is not recognised."""


@dataclass(frozen=True)
class UpcRecord:
    store: int
    week: int
    upc: str
    price: float
    move: float
    tablets: float
    cls: str

    @property
    def revenue(self) -> float:
        return self.price * self.move

    @property
    def unit_price(self) -> float:
        return self.price * 100.0 / self.tablets


@dataclass
class IngestReport:
    records: list
    dropped_unclassified: int = 0
    rejected: list = field(default_factory=list)  # (line number, reason)

    def __len__(self):
        return len(self.records)


def brand_classes() -> dict:
    """Brand keyword -> active-ingredient class, from the bundled brand list."""
    text = resources.files("neuraldemand.resources").joinpath("brands.csv").read_text(encoding="utf-8")
    return {row["brand"].lower(): row["class"] for row in csv.DictReader(text.splitlines())}


def classify_description(description: str, brands: Optional[dict] = None) -> str:
    """Map a product description to a class by brand keyword (longest match wins)."""
    brands = brand_classes() if brands is None else brands
    d = description.lower()
    hits = [b for b in brands if b in d]
    if not hits:
        return "unclassified"
    return brands[max(hits, key=len)]


def load_classification(path) -> dict:
    """Read a ``upc,class`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = {"upc", "class"} - set(rd.fieldnames or ())
        if missing:
            raise SchemaError(f"classification file lacks column(s) {sorted(missing)}")
        return {row["upc"].strip(): row["class"].strip().lower() for row in rd}


def ingest_upc_csv(path, classification: Optional[dict] = None) -> IngestReport:
    """Parse UPC rows, dropping unclassified products and rejecting malformed rows.

    ``classification`` (upc -> class) overrides the file's ``class`` column.
    """
    recs = []
    dropped = 0
    rejected = []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        header = rd.fieldnames or []
        for col in UPC_COLUMNS:
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        for row in rd:
            line = rd.line_num
            try:
                upc = row["upc"].strip()
                cls = (classification.get(upc) if classification else None) or row["class"]
                cls = cls.strip().lower()
                rec = UpcRecord(
                    int(row["store"]),
                    int(row["week"]),
                    upc,
                    float(row["price"]),
                    float(row["move"]),
                    float(row["tablets"]),
                    cls,
                )
            except (TypeError, ValueError, AttributeError) as exc:
                rejected.append((line, f"unparseable: {exc}"))
                continue
            if not (np.isfinite(rec.price) and rec.price >= 0):
                rejected.append((line, "negative or non-finite price"))
                continue
            if not (np.isfinite(rec.tablets) and rec.tablets > 0):
                rejected.append((line, "tablets must be positive"))
                continue
            if not (np.isfinite(rec.move) and rec.move >= 0):
                rejected.append((line, "negative or non-finite movement"))
                continue
            if rec.cls not in CLASSES:
                dropped += 1
                continue
            recs.append(rec)
    if dropped:
        log.info("dropped %d unclassified rows", dropped)
    for line, why in rejected:
        log.warning("rejected line %d: %s", line, why)
    return IngestReport(recs, dropped, rejected)


def build_panel(records: Iterable[UpcRecord], classes: Sequence[str] = CLASSES) -> PanelDataset:
    """Aggregate UPC records to a balanced store-week panel sorted by (store, week).

    Store-weeks where any good has zero revenue are dropped; the count is in
    ``meta["dropped_cells"]``. Per-good revenues are kept in ``columns["revenue"]``.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    gidx = {c: k for k, c in enumerate(classes)}
    G = len(classes)
    rev = defaultdict(lambda: np.zeros(G))
    rp = defaultdict(lambda: np.zeros(G))
    for r in records:
        if r.cls not in gidx:
            continue
        key = (r.store, r.week)
        R = r.revenue
        rev[key][gidx[r.cls]] += R
        rp[key][gidx[r.cls]] += R * r.unit_price
    keys = sorted(rev)
    keep = [k for k in keys if np.all(rev[k] > 0)]
    dropped = len(keys) - len(keep)
    if dropped:
        log.info("dropped %d store-weeks with a zero-revenue good", dropped)
    if not keep:
        raise ValueError("no balanced store-week remains")
    R = np.array([rev[k] for k in keep])
    prices = np.array([rp[k] for k in keep]) / R
    tot = R.sum(axis=1)
    return PanelDataset(
        prices=prices,
        income=np.maximum(tot, 1.0) / 100.0,
        shares=R / tot[:, None],
        group=np.array([k[0] for k in keep]),
        time=np.array([k[1] for k in keep]),
        goods=tuple(classes),
        columns={"revenue": R},
        meta={"dropped_cells": dropped, "source": "upc"},
    )


def label_split(panel: PanelDataset, threshold: int = SPLIT_WEEK) -> PanelDataset:
    """Copy of ``panel`` with ``split`` set to ``"train"`` before ``threshold`` and ``"test"`` from it on."""
    out = panel.copy()
    out.split = np.where(out.time >= threshold, "test", "train")
    for side in ("train", "test"):
        if not np.any(out.split == side):
            warnings.warn(f"{side} side of the split at week {threshold} is empty", RuntimeWarning, stacklevel=2)
    return out


def temporal_split(panel: PanelDataset, threshold: int = SPLIT_WEEK) -> tuple[PanelDataset, PanelDataset]:
    """Disjoint, exhaustive split: weeks below ``threshold`` train, the rest test."""
    lab = label_split(panel, threshold)
    return lab.subset(np.flatnonzero(lab.split == "train")), lab.subset(np.flatnonzero(lab.split == "test"))


def _revenue(panel: PanelDataset) -> np.ndarray:
    R = panel.columns.get("revenue")
    return panel.shares * panel.income[:, None] if R is None else np.asarray(R)


def write_panel(panel: PanelDataset, path) -> None:
    """Write the aggregated panel CSV (store, week, price_g, share_g, income, revenue_g, split)."""
    goods = panel.goods
    R = _revenue(panel)
    split = panel.split if panel.split is not None else np.full(len(panel), "")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_TAG + "\n")
        w = csv.writer(fh)
        w.writerow(["store", "week", *(f"price_{g}" for g in goods), *(f"share_{g}" for g in goods), "income", *(f"revenue_{g}" for g in goods), "split"])
        for n in range(len(panel)):
            w.writerow(
                [
                    int(panel.group[n]),
                    int(panel.time[n]),
                    *(repr(float(v)) for v in panel.prices[n]),
                    *(repr(float(v)) for v in panel.shares[n]),
                    repr(float(panel.income[n])),
                    *(repr(float(v)) for v in R[n]),
                    split[n],
                ]
            )


def read_panel(path) -> PanelDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        tag = fh.readline().rstrip("\r\n")
        if tag != FORMAT_TAG:
            raise SchemaError(f"{path.name}: expected format tag {FORMAT_TAG!r}, found {tag!r}")
        rd = csv.reader(fh)
        header = next(rd)
        rows = list(rd)
    goods = tuple(h[len("price_") :] for h in header if h.startswith("price_"))
    col = {h: k for k, h in enumerate(header)}
    for need in ("store", "week", "income", "split"):
        if need not in col:
            raise SchemaError(f"missing column {need!r}")
    arr = lambda names: np.array([[float(r[col[c]]) for c in names] for r in rows]).reshape(len(rows), len(names))  # noqa: E731
    split = np.array([r[col["split"]] for r in rows])
    return PanelDataset(
        prices=arr([f"price_{g}" for g in goods]),
        income=arr(["income"])[:, 0],
        shares=arr([f"share_{g}" for g in goods]),
        group=np.array([int(r[col["store"]]) for r in rows], dtype=np.int64),
        time=np.array([int(r[col["week"]]) for r in rows], dtype=np.int64),
        goods=goods,
        split=None if np.all(split == "") else split,
        columns={"revenue": arr([f"revenue_{g}" for g in goods])},
        meta={"source": str(path)},
    )
