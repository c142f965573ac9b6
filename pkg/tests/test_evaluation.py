"""Detection metrics, anchored by an AP oracle written from the
definition with no shared code: own IoU, own ranking, own matching, own
interpolation.  The package implementation must agree to 1e-12.
"""

from collections import namedtuple

import numpy as np
import pytest

from defnet.evaluation import (
    PrCurve,
    average_precision,
    average_precision_bruteforce,
    iou,
    mean_ap,
    proposal_recall,
    write_eval_report,
)

Box = namedtuple("Box", "x1 y1 x2 y2")
Det = namedtuple("Det", "image_id box confidence class_id")


# ----- the independent oracle


def oracle_iou(a, b):
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    return inter / (area_a + area_b - inter)


def oracle_ap(dets, gt, class_id, thr=0.5):
    """All-points interpolated AP, restated from scratch.

    Rank by descending confidence (ties by input position).  Each
    detection greedily claims the unclaimed ground-truth box of the class
    with the highest IoU in its image, counting as a true positive when
    that IoU reaches the threshold.  AP is the sum over true-positive
    ranks of (recall step) x (best precision at any rank from there on).
    """
    dets = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, i))
    gt_of = {}
    for iid, entries in gt.items():
        gt_of[iid] = [box for box, cls in entries if cls == class_id]
    n_gt = sum(len(v) for v in gt_of.values())
    if n_gt == 0:
        return 0.0
    used = {iid: set() for iid in gt_of}
    tp_flags = []
    for i in order:
        d = dets[i]
        best_g, best_o = None, 0.0
        for g, box in enumerate(gt_of.get(d.image_id, [])):
            if g in used.get(d.image_id, set()):
                continue
            o = oracle_iou(d.box, box)
            if o > best_o:
                best_o, best_g = o, g
        if best_g is not None and best_o >= thr:
            used[d.image_id].add(best_g)
            tp_flags.append(1)
        else:
            tp_flags.append(0)
    precisions, recalls, tp = [], [], 0
    for k, f in enumerate(tp_flags):
        tp += f
        precisions.append(tp / (k + 1.0))
        recalls.append(tp / float(n_gt))
    ap, prev = 0.0, 0.0
    for k, f in enumerate(tp_flags):
        if f:
            ap += (recalls[k] - prev) * max(precisions[k:])
            prev = recalls[k]
    return ap


def _random_case(rng, n_images=3, max_det=10, max_gt=5):
    gt = {}
    dets = []
    for i in range(n_images):
        iid = "im%d" % i
        entries = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            x1, y1 = rng.uniform(0, 30, 2)
            w, h = rng.uniform(2, 10, 2)
            entries.append((Box(x1, y1, x1 + w, y1 + h), int(rng.integers(0, 2))))
        gt[iid] = entries
        for _ in range(int(rng.integers(0, max_det + 1))):
            if entries and rng.uniform() < 0.6:
                base, _cls = entries[int(rng.integers(0, len(entries)))]
                dx, dy = rng.uniform(-3, 3, 2)
                box = Box(base.x1 + dx, base.y1 + dy, base.x2 + dx, base.y2 + dy)
            else:
                x1, y1 = rng.uniform(0, 30, 2)
                w, h = rng.uniform(2, 10, 2)
                box = Box(x1, y1, x1 + w, y1 + h)
            conf = float(rng.choice([0.3, 0.5, 0.9]) if rng.uniform() < 0.3
                         else rng.uniform())
            dets.append(Det(iid, box, conf, int(rng.integers(0, 2))))
    return dets, gt


# ----- iou


def test_iou_known_values():
    a = Box(0, 0, 2, 2)
    assert iou(a, Box(0, 0, 2, 2)) == pytest.approx(1.0)
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)
    assert iou(a, Box(2, 2, 4, 4)) == 0.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0


def test_iou_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = Box(*np.sort(rng.uniform(0, 10, 2)), *np.sort(rng.uniform(0, 10, 2)))
        a = Box(a[0], a[2], a[1], a[3])
        b = Box(*np.sort(rng.uniform(0, 10, 2)), *np.sort(rng.uniform(0, 10, 2)))
        b = Box(b[0], b[2], b[1], b[3])
        assert iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-12)


# ----- average precision


def test_ap_perfect_detector():
    gt = {"a": [(Box(0, 0, 5, 5), 0)]}
    dets = [Det("a", Box(0, 0, 5, 5), 0.9, 0)]
    assert average_precision(dets, gt, 0).ap == pytest.approx(1.0)


def test_ap_all_misses():
    gt = {"a": [(Box(0, 0, 5, 5), 0)]}
    dets = [Det("a", Box(20, 20, 25, 25), 0.9, 0)]
    assert average_precision(dets, gt, 0).ap == 0.0


def test_ap_no_ground_truth_is_zero():
    assert average_precision([Det("a", Box(0, 0, 1, 1), 0.5, 0)], {}, 0).ap == 0.0


def test_ap_half_and_half():
    # Two GT, one found at rank 1, one missed: AP = 0.5 (one recall step
    # of 0.5 at precision 1.0).
    gt = {"a": [(Box(0, 0, 5, 5), 0), (Box(20, 20, 25, 25), 0)]}
    dets = [Det("a", Box(0, 0, 5, 5), 0.9, 0),
            Det("a", Box(40, 40, 45, 45), 0.5, 0)]
    assert average_precision(dets, gt, 0).ap == pytest.approx(0.5)


def test_ap_matches_oracle_exhaustive_small():
    rng = np.random.default_rng(1)
    for _ in range(300):
        dets, gt = _random_case(rng, n_images=2, max_det=3, max_gt=2)
        for cls in (0, 1):
            got = average_precision(dets, gt, cls).ap
            want = oracle_ap(dets, gt, cls)
            assert got == pytest.approx(want, abs=1e-12)


def test_ap_matches_oracle_larger_cases():
    rng = np.random.default_rng(2)
    for _ in range(100):
        dets, gt = _random_case(rng)
        for cls in (0, 1):
            got = average_precision(dets, gt, cls).ap
            want = oracle_ap(dets, gt, cls)
            assert got == pytest.approx(want, abs=1e-12)


def test_ap_bruteforce_agrees():
    rng = np.random.default_rng(3)
    for _ in range(100):
        dets, gt = _random_case(rng)
        for cls in (0, 1):
            a = average_precision(dets, gt, cls).ap
            b = average_precision_bruteforce(dets, gt, cls)
            assert a == pytest.approx(b, abs=1e-12)


def test_ap_invariant_under_monotone_confidence_maps():
    rng = np.random.default_rng(4)
    for _ in range(30):
        dets, gt = _random_case(rng)
        base = average_precision(dets, gt, 0).ap
        for f in (lambda c: 2 * c + 1, lambda c: c ** 3, np.tanh,
                  lambda c: np.exp(c / 2)):
            mapped = [d._replace(confidence=float(f(d.confidence)))
                      for d in dets]
            assert average_precision(mapped, gt, 0).ap == pytest.approx(
                base, abs=1e-12)


def test_ap_tie_handling_is_stable():
    gt = {"a": [(Box(0, 0, 5, 5), 0)]}
    dets = [Det("a", Box(40, 40, 45, 45), 0.5, 0),
            Det("a", Box(0, 0, 5, 5), 0.5, 0)]
    # Tie broken by input position: the miss ranks first, so precision
    # at the hit is 1/2 and AP = 0.5.
    assert average_precision(dets, gt, 0).ap == pytest.approx(0.5)


def test_pr_curve_points_are_monotone_in_recall():
    rng = np.random.default_rng(5)
    dets, gt = _random_case(rng)
    curve = average_precision(dets, gt, 0)
    recalls = [r for r, _p in curve.points]
    assert recalls == sorted(recalls)


def test_pr_curve_rejects_decreasing_recall():
    with pytest.raises(ValueError):
        PrCurve(points=[(0.5, 1.0), (0.25, 1.0)], ap=0.0)


# ----- mean AP and reports


def test_mean_ap_over_gt_classes_only():
    gt = {"a": [(Box(0, 0, 5, 5), 0), (Box(10, 10, 15, 15), 2)]}
    dets = [Det("a", Box(0, 0, 5, 5), 0.9, 0),
            Det("a", Box(10, 10, 15, 15), 0.8, 2),
            Det("a", Box(20, 20, 25, 25), 0.7, 1)]  # class 1 has no GT
    value, per_class = mean_ap(dets, gt)
    assert set(per_class) == {0, 2}
    assert value == pytest.approx(1.0)


def test_mean_ap_empty_gt_warns():
    with pytest.warns(UserWarning):
        value, per_class = mean_ap([], {})
    assert value == 0.0 and per_class == {}


def test_write_eval_report(tmp_path):
    p = tmp_path / "report.csv"
    write_eval_report(p, {0: 0.5, 1: 0.25}, 0.375)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "class_id,ap"
    assert lines[-1].startswith("mAP,")
    assert "0.375" in lines[-1]


# ----- proposal recall


def test_proposal_recall_counts_covered_gt():
    gt = {"a": [(Box(0, 0, 10, 10), 0), (Box(20, 20, 30, 30), 1)]}
    props = {"a": [Box(1, 1, 10, 10)]}
    assert proposal_recall(props, gt) == pytest.approx(0.5)
    props = {"a": [Box(1, 1, 10, 10), Box(21, 21, 30, 30)]}
    assert proposal_recall(props, gt) == pytest.approx(1.0)


def test_proposal_recall_empty_gt_means_nothing_missed():
    with pytest.warns(UserWarning):
        assert proposal_recall({}, {}) == 1.0
