"""Overlap and boundary-distance metrics for binary segmentations, plus reporting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .bd import boundary_gt
from .errors import UndefinedMetricError

METRICS = ("dice", "jaccard", "accuracy", "recall", "precision", "hd", "abd")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Dice, Jaccard, accuracy, recall and precision.

    Empty-vs-empty scores 1 on every ratio; a ratio whose denominator is
    empty only on one side scores 0.
    """
    c = confusion(pred, gt)
    both_empty = c.tp + c.fp + c.fn == 0
    fill = 1.0 if both_empty else 0.0
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, fill),
        "jaccard": _ratio(c.tp, c.tp + c.fp + c.fn, fill),
        "accuracy": (c.tp + c.tn) / c.total,
        "recall": _ratio(c.tp, c.tp + c.fn, fill),
        "precision": _ratio(c.tp, c.tp + c.fp, fill),
    }


def _boundary_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary pixel of one mask to the other mask's boundary."""
    bp, bg = boundary_gt(pred).astype(bool), boundary_gt(gt).astype(bool)
    if not bp.any() or not bg.any():
        raise UndefinedMetricError("boundary distance is undefined for an empty mask")
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    return to_gt[bp], to_pred[bg]


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets, in pixels."""
    d_pg, d_gp = _boundary_distances(pred, gt)
    return float(max(d_pg.max(), d_gp.max()))


def abd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average boundary distance: mean of the two directed mean distances."""
    d_pg, d_gp = _boundary_distances(pred, gt)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def evaluate_pair(pred: np.ndarray, gt: np.ndarray) -> dict[str, float | None]:
    """All seven metrics; undefined distances come back as None."""
    rec: dict[str, float | None] = dict(overlap_metrics(pred, gt))
    try:
        d_pg, d_gp = _boundary_distances(pred, gt)
        rec["hd"] = float(max(d_pg.max(), d_gp.max()))
        rec["abd"] = float((d_pg.mean() + d_gp.mean()) / 2.0)
    except UndefinedMetricError:
        rec["hd"] = rec["abd"] = None
    return rec


# ---------------------------------------------------------------------------
# aggregation and reporting


@dataclass
class MetricsReport:
    ids: list[str]
    folds: list[int]
    records: list[dict[str, float | None]]
    mean: dict[str, float | None] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)
    count: dict[str, int] = field(default_factory=dict)
    missing: dict[str, int] = field(default_factory=dict)
    fold_means: dict[int, dict[str, float | None]] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n_images": len(self.records),
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "missing": self.missing,
            "fold_means": {str(k): v for k, v in sorted(self.fold_means.items())},
        }


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(
    per_image: Sequence[dict[str, float | None]],
    folds: Sequence[int] | None = None,
    ids: Sequence[str] | None = None,
) -> MetricsReport:
    """Overall mean ± sample std and per-fold means; None entries are skipped and counted."""
    if not per_image:
        raise ValueError("aggregate needs at least one record")
    folds = list(folds) if folds is not None else [0] * len(per_image)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(per_image))]
    rep = MetricsReport(ids=ids, folds=folds, records=list(per_image))
    for name in METRICS:
        vals = [r[name] for r in per_image if r.get(name) is not None]
        rep.mean[name], rep.std[name] = _mean_std(vals)
        rep.count[name] = len(vals)
        rep.missing[name] = len(per_image) - len(vals)
    for f in sorted(set(folds)):
        recs = [r for r, k in zip(per_image, folds) if k == f]
        rep.fold_means[f] = {
            name: _mean_std([r[name] for r in recs if r.get(name) is not None])[0] for name in METRICS
        }
    return rep


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "fold", *METRICS])
        for sid, fold, rec in zip(report.ids, report.folds, report.records):
            writer.writerow([sid, fold, *(_fmt(rec.get(m)) for m in METRICS)])


def write_json(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
