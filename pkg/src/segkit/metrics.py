"""
Confusion-matrix metrics over the nested WT / TC / ET tumour regions.

Ratios whose denominator is zero come back as NaN and raise an
:class:`~segkit.errors.UndefinedMetricWarning`; reports list them under
``undefined`` rather than substituting 0 or 1.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, UndefinedMetricWarning
from .volume import LabelVolume


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: FrozenSet[int]

    def mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, sorted(self.labels))


WT = RegionSpec("WT", frozenset({1, 2, 3}))
TC = RegionSpec("TC", frozenset({1, 3}))
ET = RegionSpec("ET", frozenset({3}))
REGIONS = (WT, TC, ET)

METRIC_NAMES = ("accuracy", "dice", "iou", "sensitivity", "specificity")
REPORT_COLUMNS = ("case", "region", "tp", "fp", "fn", "tn") + METRIC_NAMES


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelVolume) else np.asarray(x)


def confusion(pred, truth, region: RegionSpec = WT) -> ConfusionCounts:
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    pm, tm = region.mask(p), region.mask(t)
    tp = int(np.count_nonzero(pm & tm))
    fp = int(np.count_nonzero(pm & ~tm))
    fn = int(np.count_nonzero(~pm & tm))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        warnings.warn(f"{name} undefined (zero denominator)", UndefinedMetricWarning, stacklevel=3)
        return math.nan
    return num / den


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, "iou")


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy")


def dice_coefficient(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice")


def soft_dice(p, t, foreground_only: bool = True) -> float:
    """``1 - dice_loss(p, t)`` on probability / one-hot arrays ``(N, C, ...)``."""
    p = p if isinstance(p, ad.Tensor) else ad.Tensor(np.asarray(p))
    return 1.0 - float(ad.dice_loss(p, t, foreground_only=foreground_only).data)


METRICS = {
    "accuracy": accuracy,
    "dice": dice_coefficient,
    "iou": iou,
    "sensitivity": sensitivity,
    "specificity": specificity,
}


def metric_row(c: ConfusionCounts) -> Dict[str, float]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        return {name: fn(c) for name, fn in METRICS.items()}


def argmax_labels(pred_probs) -> np.ndarray:
    """Class map from ``(C, ...)`` or ``(1, C, ...)`` probabilities; ties -> lowest id."""
    probs = pred_probs.data if isinstance(pred_probs, ad.Tensor) else np.asarray(pred_probs)
    if probs.ndim == 5:
        if probs.shape[0] != 1:
            raise ShapeError("evaluate one case at a time")
        probs = probs[0]
    return probs.argmax(axis=0).astype(np.uint8)


def evaluate_case(pred_probs, truth, case: str = "") -> List[dict]:
    """One row per region plus a ``mean`` row.

    The mean row sums the counts and averages each metric over the regions
    where it is defined. ``row["undefined"]`` lists metrics that were NaN.
    """
    pred = argmax_labels(pred_probs)
    t = _labels(truth)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {t.shape} differ")
    rows = []
    for region in REGIONS:
        c = confusion(pred, t, region)
        rows.append(_row(case, region.name, c, metric_row(c)))
    rows.append(_mean_row(case, rows))
    return rows


def _row(case, region, c: ConfusionCounts, metrics: Dict[str, float]) -> dict:
    row = {"case": case, "region": region, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
    row.update(metrics)
    row["undefined"] = [k for k in METRIC_NAMES if math.isnan(metrics[k])]
    return row


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def _mean_row(case, rows: Sequence[dict]) -> dict:
    c = ConfusionCounts(*(sum(r[k] for r in rows) for k in ("tp", "fp", "fn", "tn")))
    metrics = {k: _nanmean(r[k] for r in rows) for k in METRIC_NAMES}
    return _row(case, "mean", c, metrics)


def aggregate(case_rows: Sequence[dict]) -> List[dict]:
    """Macro average over cases (equal case weight), per region."""
    out = []
    for region in [r.name for r in REGIONS] + ["mean"]:
        rows = [r for r in case_rows if r["region"] == region]
        if not rows:
            continue
        c = ConfusionCounts(*(sum(r[k] for r in rows) for k in ("tp", "fp", "fn", "tn")))
        metrics = {k: _nanmean(r[k] for r in rows) for k in METRIC_NAMES}
        out.append(_row("ALL", region, c, metrics))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])


def read_report_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("tp", "fp", "fn", "tn"):
            r[k] = int(r[k])
        for k in METRIC_NAMES:
            r[k] = float(r[k])
        r["undefined"] = [k for k in METRIC_NAMES if math.isnan(r[k])]
    return rows


def _json_safe(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def write_summary_json(case_rows: Sequence[dict], path) -> dict:
    summary = {
        "cases": sorted({r["case"] for r in case_rows}),
        "aggregate": [{k: _json_safe(v) for k, v in r.items()} for r in aggregate(case_rows)],
        "per_case": [{k: _json_safe(v) for k, v in r.items()} for r in case_rows],
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
