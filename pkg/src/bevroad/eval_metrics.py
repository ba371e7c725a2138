"""
Pixel-wise road evaluation.

Confidences are quantised to 0..255 and swept over all 256 thresholds; a
pixel is predicted road at threshold ``t`` when ``round(255 * p) >= t``.
Only pixels inside the ground-truth valid mask are counted. Aggregation
pools raw confusion counts across scenes before any ratio is taken.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .kitti_io import GtMaskPair, quantize_unit

N_THRESHOLDS = 256
HALF_THRESHOLD = 128  # round(255 * 0.5) == 128
AP_RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass
class PrCurve:
    """Confusion counts at each threshold 0..255 (arrays of length 256)."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def thresholds(self) -> np.ndarray:
        return np.arange(N_THRESHOLDS)

    def counts(self, t: int) -> ConfusionCounts:
        return ConfusionCounts(int(self.tp[t]), int(self.fp[t]), int(self.tn[t]), int(self.fn[t]))

    @property
    def precision(self) -> np.ndarray:
        pos = self.tp + self.fp
        return np.where(pos > 0, self.tp / np.maximum(pos, 1), 0.0)

    @property
    def recall(self) -> np.ndarray:
        p = self.tp + self.fn
        return np.where(p > 0, self.tp / np.maximum(p, 1), 0.0)

    @property
    def f1(self) -> np.ndarray:
        pr, rc = self.precision, self.recall
        denom = pr + rc
        return np.where(denom > 0, 2 * pr * rc / np.where(denom > 0, denom, 1.0), 0.0)

    def __add__(self, other: "PrCurve") -> "PrCurve":
        return PrCurve(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class MetricReport:
    max_f1: float
    best_threshold: int
    ap: float
    precision: float
    recall: float
    fpr: float
    fnr: float
    iou_road: float
    iou_background: float
    binary_iou_mean: float

    def as_dict(self) -> dict:
        return asdict(self)

    def to_keyvalue(self) -> str:
        """Machine-readable ``key=value`` lines."""
        pairs = [
            ("maxf", self.max_f1),
            ("ap", self.ap),
            ("pre", self.precision),
            ("rec", self.recall),
            ("fpr", self.fpr),
            ("fnr", self.fnr),
            ("iou_road", self.iou_road),
            ("iou_bg", self.iou_background),
            ("biou", self.binary_iou_mean),
        ]
        lines = [f"{k}={v:.6f}" for k, v in pairs]
        lines.append(f"threshold={self.best_threshold}")
        return "\n".join(lines) + "\n"


def _check(conf: np.ndarray, gt: GtMaskPair) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim == 3 and conf.shape[2] == 1:
        conf = conf[:, :, 0]
    if conf.shape != gt.shape:
        raise ShapeError(f"confidence {conf.shape} does not match ground truth {gt.shape}")
    return conf


def confusion_at_threshold(conf: np.ndarray, gt: GtMaskPair, t: int) -> ConfusionCounts:
    conf = _check(conf, gt)
    pred = quantize_unit(conf).astype(np.int64) >= t
    road, valid = gt.road & gt.valid, gt.valid
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & road)),
        fp=int(np.count_nonzero(pred & ~road & valid)),
        tn=int(np.count_nonzero(~pred & ~road & valid)),
        fn=int(np.count_nonzero(~pred & road)),
    )


def pr_curve(conf: np.ndarray, gt: GtMaskPair) -> PrCurve:
    """Counts for every threshold at once via per-level histograms."""
    conf = _check(conf, gt)
    levels = quantize_unit(conf).astype(np.int64)
    road = gt.road & gt.valid
    neg = gt.valid & ~gt.road
    road_hist = np.bincount(levels[road], minlength=N_THRESHOLDS)
    neg_hist = np.bincount(levels[neg], minlength=N_THRESHOLDS)
    # positives at t = pixels with level >= t (reverse cumulative sum)
    tp = np.cumsum(road_hist[::-1])[::-1]
    fp = np.cumsum(neg_hist[::-1])[::-1]
    return PrCurve(tp, fp, neg_hist.sum() - fp, road_hist.sum() - tp)


def max_f1(curve: PrCurve) -> tuple[float, int]:
    """Best F1 over thresholds; the lowest threshold wins ties."""
    if curve.tp[0] + curve.fn[0] == 0:
        raise DegenerateInputError("no valid road pixels; F1 is undefined")
    f1 = curve.f1
    best = int(np.argmax(f1))
    return float(f1[best]), best


def average_precision(curve: PrCurve) -> float:
    """11-point interpolated average precision."""
    precision, recall = curve.precision, curve.recall
    total = 0.0
    for r in AP_RECALL_LEVELS:
        reach = recall >= r
        total += float(precision[reach].max()) if reach.any() else 0.0
    return total / len(AP_RECALL_LEVELS)


def _iou_from_counts(c: ConfusionCounts) -> tuple[float, float, float]:
    road_union = c.tp + c.fp + c.fn
    bg_union = c.tn + c.fp + c.fn
    iou_road = c.tp / road_union if road_union else 1.0
    iou_bg = c.tn / bg_union if bg_union else 1.0
    return iou_road, iou_bg, (iou_road + iou_bg) / 2.0


def binary_iou(conf: np.ndarray, gt: GtMaskPair, threshold: float = 0.5) -> tuple[float, float, float]:
    """``(road IoU, background IoU, mean)`` with the prediction binarised at ``threshold``."""
    t = int(quantize_unit(threshold))
    return _iou_from_counts(confusion_at_threshold(conf, gt, t))


def binary_iou_from_counts(c: ConfusionCounts) -> tuple[float, float, float]:
    return _iou_from_counts(c)


def report_from_curve(curve: PrCurve) -> MetricReport:
    f1, best = max_f1(curve)
    c = curve.counts(best)
    pos, neg = c.tp + c.fn, c.fp + c.tn
    recall = c.tp / pos
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    fpr = c.fp / neg if neg else 0.0
    iou_road, iou_bg, biou = _iou_from_counts(curve.counts(HALF_THRESHOLD))
    return MetricReport(
        max_f1=f1,
        best_threshold=best,
        ap=average_precision(curve),
        precision=precision,
        recall=recall,
        fpr=fpr,
        fnr=1.0 - recall,
        iou_road=iou_road,
        iou_background=iou_bg,
        binary_iou_mean=biou,
    )


def evaluate_scene(conf: np.ndarray, gt: GtMaskPair) -> MetricReport:
    return report_from_curve(pr_curve(conf, gt))


def aggregate(
    curves: Mapping[str, PrCurve],
    categories: Mapping[str, str] | None = None,
    grouping: str = "overall",
) -> dict[str, MetricReport]:
    """Pool per-scene curves and report per group.

    ``grouping='category'`` yields one report per category present (e.g.
    ``UM``) plus ``URBAN`` over all scenes; ``'overall'`` yields ``URBAN`` only.
    """
    if grouping not in ("category", "overall"):
        raise ValueError(f"unknown grouping {grouping!r}")
    if not curves:
        raise DegenerateInputError("nothing to aggregate")
    groups: dict[str, list[str]] = {}
    if grouping == "category":
        if categories is None:
            raise ValueError("category grouping needs a scene -> category map")
        for sid in sorted(curves):
            groups.setdefault(categories[sid], []).append(sid)
        groups = {k: groups[k] for k in sorted(groups)}
    groups["URBAN"] = sorted(curves)

    out = {}
    for name, ids in groups.items():
        pooled = _pool(curves[i] for i in ids)
        out[name] = report_from_curve(pooled)
    return out


def _pool(curves: Iterable[PrCurve]) -> PrCurve:
    it = iter(curves)
    total = next(it)
    for c in it:
        total = total + c
    return total


def format_table(reports: Mapping[str, MetricReport]) -> str:
    head = f"{'Benchmark':<12}{'MaxF':>9}{'AP':>9}{'PRE':>9}{'REC':>9}{'FPR':>9}{'FNR':>9}{'BinaryIoU':>11}"
    rows = [head, "-" * len(head)]
    for name, r in reports.items():
        label = name if name.endswith("_ROAD") else f"{name}_ROAD"
        rows.append(
            f"{label:<12}"
            + "".join(
                f"{100 * v:>8.2f}%"
                for v in (r.max_f1, r.ap, r.precision, r.recall, r.fpr, r.fnr)
            )
            + f"{r.binary_iou_mean:>11.4f}"
        )
    return "\n".join(rows) + "\n"
