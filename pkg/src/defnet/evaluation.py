"""Detection metrics: IoU, proposal recall, average precision, mAP.

Boxes are continuous ``(x1, y1, x2, y2)`` rectangles; area is
``(x2 - x1) * (y2 - y1)`` with no pixel-grid correction.  Detections are
ranked by descending confidence with ties broken by detection id (the
position of the detection in the input list), which makes every metric
in this module a pure function of its inputs.

Matching is greedy: walking the ranked list, each detection claims the
still-unmatched ground-truth box of the same image with the highest IoU,
provided that IoU reaches the threshold.  A claimed box is never
reassigned.  ``average_precision_bruteforce`` re-implements the same
contract with naive O(n^2) loops and serves as the oracle the fast path
is tested against.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

__all__ = [
    "iou",
    "proposal_recall",
    "PrCurve",
    "average_precision",
    "average_precision_bruteforce",
    "mean_ap",
    "write_eval_report",
]


def iou(a, b) -> float:
    """Intersection-over-union of two boxes with ``x1..y2`` attributes."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# Ground truth is handed around as ``{image_id: [(box, class_id), ...]}``.
GroundTruth = Mapping[str, Sequence[Tuple[object, int]]]


def proposal_recall(proposals: Mapping[str, Sequence[object]],
                    ground_truth: GroundTruth,
                    iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth boxes covered by at least one proposal.

    A ground-truth box counts as covered when any proposal on the same
    image overlaps it with IoU >= ``iou_threshold``.  Class labels are
    ignored; this measures the proposal stage only.  An empty ground
    truth yields 1.0 with a warning, so that recall stays a "nothing was
    missed" statement.
    """
    total = 0
    covered = 0
    for image_id, entries in ground_truth.items():
        boxes = proposals.get(image_id, ())
        for gt_box, _cls in entries:
            total += 1
            for p in boxes:
                if iou(p, gt_box) >= iou_threshold:
                    covered += 1
                    break
    if total == 0:
        warnings.warn("proposal_recall: ground truth is empty; returning 1.0")
        return 1.0
    return covered / total


@dataclass
class PrCurve:
    """Precision/recall points in ranked order plus the summary AP.

    ``points`` holds one ``(recall, precision)`` pair per detection in
    descending-confidence order, so recall is non-decreasing along the
    list.  ``ap`` is the all-points interpolated area: at every recall
    level the precision envelope ``max(precision at recall >= r)`` is
    integrated over the recall steps.
    """

    points: List[Tuple[float, float]] = field(default_factory=list)
    ap: float = 0.0

    def __post_init__(self):
        for k in range(1, len(self.points)):
            if self.points[k][0] < self.points[k - 1][0]:
                raise ValueError("recall must be non-decreasing along the curve")


def _ranked_order(confidences: Sequence[float]) -> List[int]:
    # Descending confidence; ties resolved by detection id (input position).
    return sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))


def _greedy_match(order: Sequence[int],
                  detections: Sequence[object],
                  ground_truth: GroundTruth,
                  class_id: int,
                  iou_threshold: float) -> Tuple[List[bool], int]:
    """Walk detections in rank order, flagging each as TP or FP.

    Returns the per-rank TP flags and the number of ground-truth boxes of
    ``class_id``.  Ties between candidate ground-truth boxes at identical
    IoU go to the box that appears first in the image's list.
    """
    gt_boxes: Dict[str, List[object]] = {}
    n_gt = 0
    for image_id, entries in ground_truth.items():
        keep = [box for box, cls in entries if cls == class_id]
        if keep:
            gt_boxes[image_id] = keep
            n_gt += len(keep)
    claimed: Dict[str, List[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}

    flags: List[bool] = []
    for det_id in order:
        det = detections[det_id]
        candidates = gt_boxes.get(det.image_id, ())
        best = -1
        best_iou = 0.0
        for g, gt_box in enumerate(candidates):
            if claimed[det.image_id][g]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap > best_iou:
                best_iou = overlap
                best = g
        if best >= 0 and best_iou >= iou_threshold:
            claimed[det.image_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def average_precision(detections: Sequence[object],
                      ground_truth: GroundTruth,
                      class_id: int,
                      iou_threshold: float = 0.5) -> PrCurve:
    """All-points interpolated AP for one class.

    ``detections`` need ``image_id``, ``box`` and ``confidence``
    attributes and should already be filtered to ``class_id`` (entries
    with a ``class_id`` attribute naming another class are dropped here
    as a convenience).  With no ground truth of the class the curve is
    empty and AP is 0.0.
    """
    dets = [d for d in detections
            if getattr(d, "class_id", class_id) == class_id]
    order = _ranked_order([d.confidence for d in dets])
    flags, n_gt = _greedy_match(order, dets, ground_truth, class_id, iou_threshold)
    if n_gt == 0:
        return PrCurve(points=[], ap=0.0)
    if not flags:
        return PrCurve(points=[], ap=0.0)

    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / float(n_gt)
    precision = tp / ranks

    # Precision envelope: best precision at any recall >= this point.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(flags)):
        if flags[k]:
            ap += (recall[k] - prev_r) * envelope[k]
            prev_r = recall[k]
    points = [(float(r), float(p)) for r, p in zip(recall, precision)]
    return PrCurve(points=points, ap=float(ap))


def average_precision_bruteforce(detections: Sequence[object],
                                 ground_truth: GroundTruth,
                                 class_id: int,
                                 iou_threshold: float = 0.5) -> float:
    """Naive O(n^2) re-statement of :func:`average_precision`.

    Same ranking, same greedy matching, but the precision envelope is
    found by scanning every later rank instead of a running maximum.
    Kept deliberately dumb; the fast path must agree with this.
    """
    dets = [d for d in detections
            if getattr(d, "class_id", class_id) == class_id]
    order = _ranked_order([d.confidence for d in dets])
    flags, n_gt = _greedy_match(order, dets, ground_truth, class_id, iou_threshold)
    if n_gt == 0 or not flags:
        return 0.0

    precisions = []
    recalls = []
    tp = 0
    for k, is_tp in enumerate(flags):
        if is_tp:
            tp += 1
        precisions.append(tp / (k + 1))
        recalls.append(tp / n_gt)

    ap = 0.0
    prev_r = 0.0
    for k, is_tp in enumerate(flags):
        if not is_tp:
            continue
        best_p = 0.0
        for j in range(k, len(flags)):
            if precisions[j] > best_p:
                best_p = precisions[j]
        ap += (recalls[k] - prev_r) * best_p
        prev_r = recalls[k]
    return ap


def mean_ap(detections: Sequence[object],
            ground_truth: GroundTruth,
            iou_threshold: float = 0.5) -> Tuple[float, Dict[int, float]]:
    """Mean AP over the classes present in the ground truth.

    Detections are routed to classes by their ``class_id`` attribute.
    Classes that never occur in the ground truth contribute nothing (a
    detector cannot score on a class with no positives), so the mean is
    taken over ground-truth classes only.
    """
    classes = sorted({cls for entries in ground_truth.values()
                      for _box, cls in entries})
    if not classes:
        warnings.warn("mean_ap: ground truth is empty; returning 0.0")
        return 0.0, {}
    per_class: Dict[int, float] = {}
    for cls in classes:
        curve = average_precision(detections, ground_truth, cls, iou_threshold)
        per_class[cls] = curve.ap
    value = float(sum(per_class.values()) / len(per_class))
    return value, per_class


def write_eval_report(path, per_class: Mapping[int, float], map_value: float) -> None:
    """Write the per-class AP table as CSV with a trailing mAP summary row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "ap"])
        for cls in sorted(per_class):
            writer.writerow([cls, "%.12g" % per_class[cls]])
        writer.writerow(["mAP", "%.12g" % map_value])
