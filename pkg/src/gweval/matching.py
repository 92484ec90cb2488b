"""Greedy confidence-ordered matching of detections to ground truth.

Detections are visited by descending confidence with ties broken by box
coordinates and then input position. Each detection claims the still-unmatched
ground-truth box with the highest IoU, provided that IoU reaches the threshold.
Ground-truth ties on IoU go to the box that comes first in coordinate order
(then input position), which keeps the result independent of input order.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InputDomainError
from .geometry import BoundingBox, boxes_to_array, iou_matrix

DEFAULT_THRESHOLDS = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75)


@dataclass(frozen=True)
class MatchResult:
    """Counts at one IoU threshold. ``pairs`` holds ``(pred_index, gt_index, iou)``."""

    threshold: float
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...] = ()

    @property
    def accuracy(self) -> float:
        return float(threshold_accuracy(self.tp, self.fp, self.fn))


ThresholdSweep = tuple[MatchResult, ...]


def _check_threshold(threshold: float) -> None:
    if not (0.0 < threshold <= 1.0):
        raise InputDomainError(f"IoU threshold {threshold} outside (0, 1]")


def _prediction_order(pred_arr: np.ndarray, confs: np.ndarray) -> np.ndarray:
    n = len(confs)
    # lexsort sorts by the last key first
    return np.lexsort((np.arange(n), pred_arr[:, 3], pred_arr[:, 2], pred_arr[:, 1], pred_arr[:, 0], -confs))


def _gt_rank(gt_arr: np.ndarray) -> np.ndarray:
    n = len(gt_arr)
    order = np.lexsort((np.arange(n), gt_arr[:, 3], gt_arr[:, 2], gt_arr[:, 1], gt_arr[:, 0]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    return rank


def _split(preds) -> tuple[np.ndarray, np.ndarray]:
    if len(preds) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    boxes = np.asarray([d[0] for d in preds], dtype=np.float64)
    confs = np.asarray([d[1] for d in preds], dtype=np.float64)
    return boxes, confs


def _candidates(gt_arr: np.ndarray, pred_arr: np.ndarray, confs: np.ndarray, min_threshold: float):
    """Per detection (in visiting order): its ground-truth candidates with IoU >= min_threshold.

    Each candidate list is sorted by IoU descending, then ground-truth rank.
    """
    order = _prediction_order(pred_arr, confs)
    if len(gt_arr) == 0 or len(pred_arr) == 0:
        return order, [()] * len(order)
    ious = iou_matrix(pred_arr[order], gt_arr)
    rank = _gt_rank(gt_arr)
    rows, cols = np.nonzero(ious >= min_threshold)
    cand: list[list] = [[] for _ in range(len(order))]
    if len(rows):
        vals = ious[rows, cols]
        srt = np.lexsort((rank[cols], -vals, rows))
        for r, c, v in zip(rows[srt].tolist(), cols[srt].tolist(), vals[srt].tolist()):
            cand[r].append((c, v))
    return order, cand


def _greedy(order, cand, threshold: float, n_gt: int, keep_pairs: bool) -> MatchResult:
    matched = set()
    pairs = []
    tp = 0
    for pos, options in enumerate(cand):
        for g, v in options:
            if v < threshold:
                break
            if g not in matched:
                matched.add(g)
                tp += 1
                if keep_pairs:
                    pairs.append((int(order[pos]), g, v))
                break
    n_pred = len(order)
    return MatchResult(threshold, tp, n_pred - tp, n_gt - tp, tuple(pairs))


def sweep_thresholds(
    gt: Sequence[BoundingBox],
    preds: Sequence,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    keep_pairs: bool = True,
) -> ThresholdSweep:
    """Match ``preds`` against ``gt`` once per threshold.

    IoUs and candidate lists are computed once and reused across thresholds.
    """
    for t in thresholds:
        _check_threshold(t)
    gt_arr = boxes_to_array(gt)
    pred_arr, confs = _split(preds)
    if not thresholds:
        return ()
    order, cand = _candidates(gt_arr, pred_arr, confs, min(thresholds))
    return tuple(_greedy(order, cand, t, len(gt_arr), keep_pairs) for t in thresholds)


def match_image(gt: Sequence[BoundingBox], preds: Sequence, threshold: float) -> MatchResult:
    """Greedy matching at a single IoU threshold.

    Args:
        gt: ground-truth boxes.
        preds: detections, anything indexable as ``(box, confidence)``.
        threshold: minimum IoU for a match, in (0, 1].
    """
    return sweep_thresholds(gt, preds, (threshold,))[0]


def threshold_accuracy(tp: int, fp: int, fn: int) -> Fraction:
    """TP / (TP + FP + FN); an image with nothing to find and nothing predicted scores 1."""
    total = tp + fp + fn
    if total == 0:
        return Fraction(1)
    return Fraction(tp, total)


def image_accuracy(sweep: Sequence[MatchResult]) -> float:
    """Mean over thresholds of TP / (TP + FP + FN), evaluated exactly then rounded once."""
    if not sweep:
        raise InputDomainError("empty threshold sweep")
    total = sum((threshold_accuracy(m.tp, m.fp, m.fn) for m in sweep), Fraction(0))
    return float(total / len(sweep))


def parse_threshold_range(text: str) -> tuple[float, ...]:
    """Parse ``start:stop:step`` (inclusive stop) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"threshold range must be start:stop:step, got {text!r}")
        start, stop, step = (Fraction(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"empty threshold range {text!r}")
        count = int((stop - start) / step) + 1
        values = tuple(float(start + k * step) for k in range(count))
    else:
        values = tuple(float(Fraction(p)) for p in text.split(",") if p.strip())
    if not values:
        raise ValueError(f"no thresholds in {text!r}")
    for v in values:
        if not (0.0 < v <= 1.0):
            raise ValueError(f"threshold {v} outside (0, 1]")
    return values
