"""Accuracy, mask IoU / mIoU and mAP@0.5 for the three evaluation tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from cacp.errors import DimensionMismatchError, LengthMismatchError
from cacp.geometry import BBox, box_iou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def accuracy(predictions: Sequence, truth: Sequence) -> float:
    if len(predictions) != len(truth):
        raise LengthMismatchError(f"{len(predictions)} predictions vs {len(truth)} labels")
    if not truth:
        raise LengthMismatchError("accuracy of an empty set is undefined")
    correct = sum(1 for p, t in zip(predictions, truth) if p == t)
    return correct / len(truth)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


def confusion(pred: np.ndarray, truth: np.ndarray, c) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionMismatchError(f"prediction {pred.shape} vs truth {truth.shape}")
    p, t = pred == c, truth == c
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)), fp=int(np.count_nonzero(p & ~t)), fn=int(np.count_nonzero(~p & t))
    )


def iou_mask(pred: np.ndarray, truth: np.ndarray, c, absent: str = "one") -> Optional[float]:
    """TP / (TP + FP + FN) for class ``c``.

    When ``c`` appears in neither mask the result is 1.0 (``absent="one"``)
    or None (``absent="skip"``).
    """
    counts = confusion(pred, truth, c)
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        if absent == "one":
            return 1.0
        if absent == "skip":
            return None
        raise ValueError(f"absent must be 'one' or 'skip', got {absent!r}")
    return counts.tp / denom


def per_class_iou(pred: np.ndarray, truth: np.ndarray, classes: Iterable, absent: str = "one") -> dict:
    return {c: iou_mask(pred, truth, c, absent) for c in classes}


def miou(pred: np.ndarray, truth: np.ndarray, classes: Iterable, absent: str = "one") -> float:
    """Unweighted mean IoU over ``classes``; skipped classes do not count."""
    classes = list(classes)
    if not classes:
        raise ValueError("class set must be non-empty")
    values = [v for v in per_class_iou(pred, truth, classes, absent).values() if v is not None]
    return float(np.mean(values)) if values else math.nan


def dataset_confusion(pairs: Iterable[tuple[np.ndarray, np.ndarray]], classes: Sequence) -> dict:
    """Confusion counts per class accumulated over many (pred, truth) mask pairs."""
    totals = {c: ConfusionCounts() for c in classes}
    for pred, truth in pairs:
        for c in classes:
            counts = confusion(pred, truth, c)
            totals[c].tp += counts.tp
            totals[c].fp += counts.fp
            totals[c].fn += counts.fn
    return totals


# -- detection ----------------------------------------------------------------


@dataclass
class DetectionMatch:
    """Predictions and ground truth for one image."""

    predictions: list[tuple[BBox, float]] = field(default_factory=list)
    ground_truth: list[BBox] = field(default_factory=list)
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")


def match_detections(images: Sequence[DetectionMatch], category: str) -> tuple[list[bool], int]:
    """Greedy matching for one class across images.

    Predictions are taken in descending score order (stable for ties); each
    claims the unmatched ground-truth box of its image with the highest IoU,
    and counts as a true positive when that IoU reaches the threshold.
    Returns the TP flag per prediction in processing order and the number
    of ground-truth boxes.
    """
    preds = []
    n_gt = 0
    for image_id, img in enumerate(images):
        n_gt += sum(1 for g in img.ground_truth if g.label == category)
        for order, (box, score) in enumerate(img.predictions):
            if box.label == category:
                if not math.isfinite(score):
                    raise ValueError("prediction scores must be finite")
                preds.append((-score, image_id, order, box))
    preds.sort(key=lambda p: (p[0], p[1], p[2]))
    taken = [[False] * len(img.ground_truth) for img in images]
    flags = []
    for _, image_id, _, box in preds:
        img = images[image_id]
        best, best_iou = None, -1.0
        for j, gt in enumerate(img.ground_truth):
            if gt.label != category or taken[image_id][j]:
                continue
            iou = box_iou(box, gt)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None and best_iou >= img.iou_threshold:
            taken[image_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if n_gt == 0:
        return math.nan
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def ap_per_class(matches: Sequence[DetectionMatch], classes: Optional[Iterable[str]] = None) -> dict[str, float]:
    if classes is None:
        classes = sorted({g.label for m in matches for g in m.ground_truth})
    result = {}
    for c in classes:
        flags, n_gt = match_detections(matches, c)
        result[c] = average_precision(flags, n_gt)
    return result


def map50(matches: Sequence[DetectionMatch], classes: Optional[Iterable[str]] = None) -> float:
    """Mean AP over classes that have at least one ground-truth box.

    Returns NaN when there is no ground truth at all.
    """
    values = [v for v in ap_per_class(matches, classes).values() if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan
