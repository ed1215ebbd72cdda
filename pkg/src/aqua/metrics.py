"""Confusion counts, segmentation metrics, pooled aggregation and report rendering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInput, ShapeMismatch
from .raster import WaterMask

METRIC_NAMES = ("pa", "iou", "precision", "recall", "f1")
METRIC_LABELS = {"pa": "PA", "iou": "IoU", "precision": "Prec", "recall": "Recall", "f1": "F1"}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    pa: float
    iou: float
    precision: float
    recall: float
    f1: float
    site: str = ""
    n_pixels: int = 0
    conventions: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        d = asdict(self)
        d["conventions"] = list(self.conventions)
        return d


def confusion(pred: WaterMask, truth: WaterMask, valid: np.ndarray | None = None) -> ConfusionCounts:
    """Pixel counts with water as the positive class, restricted to ``valid`` pixels."""
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    p = pred.values.astype(bool)
    t = truth.values.astype(bool)
    if valid is None:
        valid = np.ones(p.shape, bool)
    elif np.shape(valid) != p.shape:
        raise ShapeMismatch(f"valid grid {np.shape(valid)} vs masks {p.shape}")
    v = np.asarray(valid, bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t & v)),
        tn=int(np.count_nonzero(~p & ~t & v)),
        fp=int(np.count_nonzero(p & ~t & v)),
        fn=int(np.count_nonzero(~p & t & v)),
    )


def metrics(counts: ConfusionCounts, site: str = "") -> MetricsReport:
    """PA, IoU, precision, recall and F1 from raw counts.

    0/0 ratios are 1 when the problem is vacuously solved (no water in truth
    or prediction) and 0 otherwise; every such substitution is listed in
    ``conventions``.
    """
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    n = counts.total
    if n == 0:
        raise EmptyInput("no pixels were evaluated")
    vacuous = tp == fp == fn == 0
    notes = []

    def ratio(num, den, name):
        if den:
            return num / den
        notes.append(f"{name}:{'vacuous=1' if vacuous else 'undefined=0'}")
        return 1.0 if vacuous else 0.0

    pa = (tp + tn) / n
    iou = ratio(tp, tp + fp + fn, "iou")
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return MetricsReport(counts, pa, iou, precision, recall, f1, site, n, tuple(notes))


def aggregate_weighted(reports: Sequence[MetricsReport], site: str = "weighted") -> MetricsReport:
    """Size-weighted aggregate: pool the raw counts, then recompute every metric."""
    if not reports:
        raise EmptyInput("nothing to aggregate")
    pooled = ConfusionCounts()
    for r in reports:
        pooled = pooled + r.counts
    return metrics(pooled, site)


def normalized_confusion(counts: ConfusionCounts, mode: str = "all") -> np.ndarray:
    """2x2 grid, rows = actual (ground, water), columns = predicted (ground, water)."""
    grid = np.array([[counts.tn, counts.fp], [counts.fn, counts.tp]], dtype=np.float64)
    if mode == "all":
        if counts.total == 0:
            raise EmptyInput("no pixels")
        return grid / counts.total
    if mode == "per_class":
        rows = grid.sum(axis=1, keepdims=True)
        out = np.zeros_like(grid)
        np.divide(grid, rows, out=out, where=rows > 0)
        return out
    raise ValueError(f"mode must be 'all' or 'per_class', got {mode!r}")


def water_extent(mask: WaterMask, pixel_size_m: float = 10.0) -> float:
    """Water area in hectares."""
    return int(np.count_nonzero(mask.values)) * pixel_size_m**2 / 10_000.0


# ------------------------------------------------------------------ rendering


def report_json(rows: Mapping[str, Mapping[str, MetricsReport]], **meta) -> str:
    """Serialize ``{method: {site: report}}`` deterministically."""
    doc = {
        **meta,
        "methods": {m: {s: r.as_dict() for s, r in sites.items()} for m, sites in rows.items()},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def markdown_table(rows: Mapping[str, Mapping[str, MetricsReport]], digits: int = 2) -> str:
    """Methods as rows, one PA/IoU/Prec/Recall/F1 group per site; column best in bold."""
    methods = list(rows)
    sites = sorted({s for m in methods for s in rows[m]})
    header = ["Method"] + [f"{s} {METRIC_LABELS[k]}" for s in sites for k in METRIC_NAMES]
    best = {}
    for s in sites:
        for k in METRIC_NAMES:
            vals = [round(getattr(rows[m][s], k), digits) for m in methods if s in rows[m]]
            best[s, k] = max(vals) if vals else None
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m in methods:
        cells = [m]
        for s in sites:
            for k in METRIC_NAMES:
                if s not in rows[m]:
                    cells.append("")
                    continue
                v = round(getattr(rows[m][s], k), digits)
                text = f"{v:.{digits}f}"
                cells.append(f"**{text}**" if v == best[s, k] and len(methods) > 1 else text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
