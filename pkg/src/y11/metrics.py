"""Detection evaluation: IoU, greedy matching, precision/recall/F1, per-class
average precision by exact integration of the precision-recall envelope, and
mAP averaged over classes and over the IoU threshold sweep 0.50:0.05:0.95.

Detections are (image_id, class_id, score, (x1, y1, x2, y2)) tuples and ground
truths are (image_id, class_id, (x1, y1, x2, y2)); boxes use pixel xyxy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "iou",
    "ClassMatches",
    "MatchLedger",
    "match_detections",
    "precision_recall_f1",
    "PRCurve",
    "pr_curve",
    "average_precision",
    "mean_ap",
    "EvalReport",
    "evaluate",
    "default_thresholds",
]

Box = tuple[float, float, float, float]
DetTuple = tuple[int, int, float, Box]
GtTuple = tuple[int, int, Box]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection area over union area; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax1 > ax2 or ay1 > ay2 or bx1 > bx2 or by1 > by2:
        raise ValueError(f"invalid box: expected x1<=x2 and y1<=y2, got {a} / {b}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class ClassMatches:
    """Matching outcome for one class at one IoU threshold."""

    scores: np.ndarray  # descending
    is_tp: np.ndarray  # parallel bool flags
    num_gt: int

    @property
    def tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp(self) -> int:
        return int((~self.is_tp).sum())

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


@dataclass
class MatchLedger:
    """Per-class TP/FP flags (score-ordered) and ground-truth counts."""

    iou_thresh: float
    classes: dict[int, ClassMatches] = field(default_factory=dict)


def match_detections(
    dets: Iterable[DetTuple], gts: Iterable[GtTuple], iou_thresh: float
) -> MatchLedger:
    """Greedy matching: detections in descending score order claim their
    best-IoU unmatched same-class ground truth in the same image; a claim
    counts as TP iff that IoU >= iou_thresh. Each ground truth matches once.
    """
    gt_by_key: dict[tuple[int, int], list[Box]] = {}
    num_gt: dict[int, int] = {}
    for image_id, class_id, box in gts:
        gt_by_key.setdefault((image_id, class_id), []).append(box)
        num_gt[class_id] = num_gt.get(class_id, 0) + 1

    matched: dict[tuple[int, int], np.ndarray] = {
        key: np.zeros(len(boxes), dtype=bool) for key, boxes in gt_by_key.items()
    }
    order = sorted(enumerate(dets), key=lambda kv: (-kv[1][2], kv[0]))

    flags: dict[int, list[tuple[float, bool]]] = {}
    for _, (image_id, class_id, score, box) in order:
        key = (image_id, class_id)
        candidates = gt_by_key.get(key, [])
        best_iou, best_j = 0.0, -1
        taken = matched.get(key)
        for j, gt_box in enumerate(candidates):
            if taken[j]:
                continue
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        is_tp = best_j >= 0 and best_iou >= iou_thresh
        if is_tp:
            taken[best_j] = True
        flags.setdefault(class_id, []).append((score, is_tp))

    ledger = MatchLedger(iou_thresh)
    class_ids = set(num_gt) | set(flags)
    for cid in sorted(class_ids):
        entries = flags.get(cid, [])
        ledger.classes[cid] = ClassMatches(
            scores=np.array([s for s, _ in entries], dtype=np.float64),
            is_tp=np.array([t for _, t in entries], dtype=bool),
            num_gt=num_gt.get(cid, 0),
        )
    return ledger


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R); each 0/0 defines to 0."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class PRCurve:
    """Cumulative precision/recall points in descending-score order."""

    recall: np.ndarray
    precision: np.ndarray
    num_gt: int


def pr_curve(matches: ClassMatches) -> PRCurve:
    ct = np.cumsum(matches.is_tp.astype(np.float64))
    cf = np.cumsum((~matches.is_tp).astype(np.float64))
    recall = ct / matches.num_gt if matches.num_gt else np.zeros_like(ct)
    denom = ct + cf
    precision = np.divide(ct, denom, out=np.zeros_like(ct), where=denom > 0)
    return PRCurve(recall=recall, precision=precision, num_gt=matches.num_gt)


def average_precision(curve: PRCurve) -> float | None:
    """Exact area under the monotone precision envelope over recall.

    Returns None for classes with no ground truths; these are excluded from
    any averaging.
    """
    if curve.num_gt == 0:
        return None
    if curve.recall.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], curve.recall))
    mpre = np.concatenate(([1.0], curve.precision))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def default_thresholds() -> list[float]:
    return [round(0.5 + 0.05 * i, 2) for i in range(10)]


@dataclass
class EvalReport:
    """Per-class AP table plus the headline aggregates."""

    thresholds: list[float]
    class_ids: list[int]
    ap: dict[int, dict[float, float | None]]
    map_by_thresh: dict[float, float]
    map50: float
    map5095: float
    operating_conf: float
    precision: float
    recall: float
    f1: float


def mean_ap(
    per_class_ap: dict[int, dict[float, float | None]],
    thresholds: Sequence[float],
) -> tuple[dict[float, float], float]:
    """Average the AP table over classes per threshold, then over thresholds.

    Classes whose AP is the no-ground-truth sentinel (None) are excluded.
    Raises when nothing is evaluable.
    """
    map_by_thresh: dict[float, float] = {}
    for t in thresholds:
        values = [aps[t] for aps in per_class_ap.values() if aps[t] is not None]
        if not values:
            raise ValueError("no class with ground truths to evaluate")
        map_by_thresh[t] = float(np.mean(values))
    overall = float(np.mean([map_by_thresh[t] for t in thresholds]))
    return map_by_thresh, overall


def evaluate(
    dets: Sequence[DetTuple],
    gts: Sequence[GtTuple],
    thresholds: Sequence[float] | None = None,
    operating_conf: float = 0.25,
) -> EvalReport:
    """Full evaluation: AP per class per threshold, mAP@0.5, mAP@[.5:.95],
    and micro-averaged P/R/F1 at IoU 0.5 for detections above operating_conf.
    """
    thresholds = list(thresholds) if thresholds is not None else default_thresholds()
    ap: dict[int, dict[float, float | None]] = {}
    class_ids: set[int] = set()
    for t in thresholds:
        ledger = match_detections(dets, gts, t)
        class_ids |= set(ledger.classes)
        for cid, matches in ledger.classes.items():
            ap.setdefault(cid, {})[t] = average_precision(pr_curve(matches))
    map_by_thresh, map5095 = mean_ap(ap, thresholds)
    map50 = map_by_thresh.get(0.5, map_by_thresh[thresholds[0]])

    working = [d for d in dets if d[2] >= operating_conf]
    ledger = match_detections(working, gts, 0.5)
    tp = sum(m.tp for m in ledger.classes.values())
    fp = sum(m.fp for m in ledger.classes.values())
    fn = sum(m.fn for m in ledger.classes.values())
    p, r, f1 = precision_recall_f1(tp, fp, fn)

    return EvalReport(
        thresholds=thresholds,
        class_ids=sorted(class_ids),
        ap=ap,
        map_by_thresh=map_by_thresh,
        map50=map50,
        map5095=map5095,
        operating_conf=operating_conf,
        precision=p,
        recall=r,
        f1=f1,
    )
