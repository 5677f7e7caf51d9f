# metrics.py
"""
Thresholding, confusion counts and P / R / IoU / F1.

Dataset-level metrics pool confusion counts over tiles (micro). Macro
averages over tiles are kept alongside for comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

CSV_FIELDS = ("tile_id", "tp", "fp", "fn", "tn", "stratum", "gsd_cm")


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """1 where p >= threshold."""
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
            object.__setattr__(self, name, value)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def confusion(pred_bin, gt) -> ConfusionCounts:
    pred = _as_binary(pred_bin, "prediction")
    truth = _as_binary(gt, "ground truth")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def pool(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    iou: float
    f1: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "f1": self.f1,
            "degenerate": self.degenerate,
        }


def _ratio(num: int, den: int):
    return (num / den, False) if den else (0.0, True)


def score(conf: ConfusionCounts) -> Scores:
    """
    P = tp/(tp+fp), R = tp/(tp+fn), IoU = tp/(tp+fp+fn), F1 = 2PR/(P+R).

    Any zero denominator yields 0 and sets `degenerate`. That includes
    P + R = 0, i.e. every tp = 0 case, even when fp and fn are both positive.
    """
    p, dp = _ratio(conf.tp, conf.tp + conf.fp)
    r, dr = _ratio(conf.tp, conf.tp + conf.fn)
    iou, di = _ratio(conf.tp, conf.tp + conf.fp + conf.fn)
    # 2tp/(2tp+fp+fn) equals 2PR/(P+R) whenever the latter is defined
    f1, df = _ratio(2 * conf.tp, 2 * conf.tp + conf.fp + conf.fn)
    df = df or p + r == 0
    return Scores(p, r, iou, f1, dp or dr or di or df)


def macro_scores(counts: Iterable[ConfusionCounts]) -> Scores:
    """Per-tile average of each metric over the tiles where it is defined."""
    counts = list(counts)
    cols = {"precision": [], "recall": [], "iou": [], "f1": []}
    for c in counts:
        if c.tp + c.fp:
            cols["precision"].append(c.tp / (c.tp + c.fp))
        if c.tp + c.fn:
            cols["recall"].append(c.tp / (c.tp + c.fn))
        if c.tp + c.fp + c.fn:
            cols["iou"].append(c.tp / (c.tp + c.fp + c.fn))
            cols["f1"].append(2 * c.tp / (2 * c.tp + c.fp + c.fn))
    means = {k: float(np.mean(v)) if v else 0.0 for k, v in cols.items()}
    return Scores(degenerate=any(not v for v in cols.values()), **means)


# ---- Per-tile CSV -----------------------------------------------------------


@dataclass(frozen=True)
class TileConfusion:
    tile_id: str
    counts: ConfusionCounts
    stratum: Optional[str] = None
    gsd_cm: Optional[int] = None


def write_confusion_csv(path, rows: Iterable[TileConfusion]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_FIELDS)
        for r in rows:
            c = r.counts
            writer.writerow([r.tile_id, c.tp, c.fp, c.fn, c.tn, r.stratum or "", "" if r.gsd_cm is None else r.gsd_cm])
    return path


def read_confusion_csv(path) -> List[TileConfusion]:
    out: List[TileConfusion] = []
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                TileConfusion(
                    tile_id=row["tile_id"],
                    counts=ConfusionCounts(int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"])),
                    stratum=row["stratum"] or None,
                    gsd_cm=int(row["gsd_cm"]) if row["gsd_cm"] else None,
                )
            )
    return out
