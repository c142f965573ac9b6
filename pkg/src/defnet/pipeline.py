"""Detection pipeline: rejection, box scoring, sub-box pooling of
features, context fusion, box refinement, and non-maximum suppression.

The pipeline is a chain of independently toggleable stages.  Candidate
boxes are first cheaply scored and thresholded (rejection), survivors
are warped to the network input and scored, and the raw scores may then
be replaced or adjusted by the sub-box classifier and the context
fusion before refinement and NMS produce the final detections.

Every stage is written so that its "off" and "identity" behaviours
coincide: the sub-box classifier warm-starts as a copy of the head on
the root feature, the context fusion warm-starts as the identity on the
detector scores, and refinement falls back to the input box whenever
its output would be degenerate.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .evaluation import iou
from .imageops import crop_resize
from .layers import FcLayer, LossKind, loss_forward_backward

logger = logging.getLogger(__name__)

__all__ = [
    "BoundingBox", "ScoredProposal", "FeatureRecord", "Detection",
    "RecordFormatError", "AuxBundleError", "reject_proposals", "score_box",
    "score_boxes", "subbox_features", "SubboxClassifier", "ContextFusion",
    "make_context_scorer", "BoxRegressor", "regression_targets",
    "nms", "nms_bruteforce", "DetectOptions", "DetectResult", "detect",
    "save_proposals", "load_proposals", "save_detections", "load_detections",
    "label_boxes", "AuxBundle", "save_aux_bundle", "load_aux_bundle",
]

REJECTION_THRESHOLD = -1.1
NMS_THRESHOLD = 0.3


class RecordFormatError(ValueError):
    """A proposals/detections file line violates the documented schema."""


class AuxBundleError(ValueError):
    """An auxiliary-stage bundle file violates its schema."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box coordinates must be finite, got %r" % (vals,))
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError("box must have positive extent, got %r" % (vals,))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clamp(self, image_w: float, image_h: float) -> "BoundingBox":
        """Clip to the image; raises if nothing of the box remains."""
        x1 = min(max(self.x1, 0.0), image_w - 1.0)
        y1 = min(max(self.y1, 0.0), image_h - 1.0)
        x2 = max(min(self.x2, float(image_w)), x1 + 1.0)
        y2 = max(min(self.y2, float(image_h)), y1 + 1.0)
        return BoundingBox(x1, y1, x2, y2)

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_seq(cls, seq) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


@dataclass
class ScoredProposal:
    source_id: int
    box: BoundingBox
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or not np.isfinite(self.scores).all():
            raise ValueError("proposal scores must be a finite vector")


@dataclass
class FeatureRecord:
    box_id: int
    feature: np.ndarray


@dataclass
class Detection:
    image_id: str
    box: BoundingBox
    class_id: int
    confidence: float


# ---------------------------------------------------------------------------
# Stage 1: rejection


def reject_proposals(proposals: Sequence[ScoredProposal],
                     threshold: float = REJECTION_THRESHOLD,
                     ) -> Tuple[List[ScoredProposal], List[ScoredProposal]]:
    """Partition proposals by their best per-class score.

    A proposal whose maximum score falls strictly below ``threshold``
    is rejected.  The two returned lists preserve input order and
    together form the input exactly.
    """
    kept: List[ScoredProposal] = []
    rejected: List[ScoredProposal] = []
    for p in proposals:
        if float(np.max(p.scores)) < threshold:
            rejected.append(p)
        else:
            kept.append(p)
    return kept, rejected


# ---------------------------------------------------------------------------
# Stage 2: scoring


def score_box(net, image: np.ndarray, box: BoundingBox):
    """Warp one box crop to the network input and run the model.

    Returns ``(scores, feature)`` where ``feature`` is the penultimate
    concatenated feature vector used by the sub-box and refinement
    stages.  The box is clamped to the image first; a box that vanishes
    under clamping raises ``ValueError``.
    """
    c, h, w = image.shape
    clamped = box.clamp(w, h)
    crop = crop_resize(image, (clamped.x1, clamped.y1, clamped.x2, clamped.y2),
                       net.config.input_shape[1:])
    scores, cache = net.forward(crop)
    return scores, cache["head_in"].copy()


def score_boxes(net, image: np.ndarray, boxes: Sequence[BoundingBox]):
    """Score many boxes; returns ``(scores [n, K], features [n, F])``."""
    n = len(boxes)
    scores = np.zeros((n, net.config.num_classes))
    feats = np.zeros((n, net.feature_dim()))
    for i, b in enumerate(boxes):
        scores[i], feats[i] = score_box(net, image, b)
    return scores, feats


# ---------------------------------------------------------------------------
# Stage 3: sub-box features


def _corner_subboxes(root: BoundingBox) -> List[BoundingBox]:
    hw = root.width / 2.0
    hh = root.height / 2.0
    return [
        BoundingBox(root.x1, root.y1, root.x1 + hw, root.y1 + hh),
        BoundingBox(root.x1 + hw, root.y1, root.x2, root.y1 + hh),
        BoundingBox(root.x1, root.y1 + hh, root.x1 + hw, root.y2),
        BoundingBox(root.x1 + hw, root.y1 + hh, root.x2, root.y2),
    ]


def subbox_features(root_id: int,
                    root_box: BoundingBox,
                    proposals: Sequence[Tuple[int, BoundingBox]],
                    feature_store: Mapping[int, np.ndarray]) -> np.ndarray:
    """Augment a box's feature with pooled features of its quadrants.

    Each of the four half-size corner sub-boxes is matched to the
    proposal with the highest IoU (ties go to the lowest proposal id).
    The result is ``concat(f_root, max_n f_n, mean_n f_n)`` over the
    four matched features — three times the base feature length.
    """
    if not proposals:
        raise ValueError("sub-box matching needs a non-empty proposal list")
    f_root = np.asarray(feature_store[root_id], dtype=np.float64)
    matched = []
    for sub in _corner_subboxes(root_box):
        best_id = None
        best_iou = -1.0
        for pid, pbox in proposals:
            overlap = iou(sub, pbox)
            if overlap > best_iou or (overlap == best_iou and best_id is not None
                                      and pid < best_id):
                best_iou = overlap
                best_id = pid
        matched.append(np.asarray(feature_store[best_id], dtype=np.float64))
    stack = np.stack(matched)
    return np.concatenate([f_root, stack.max(axis=0), stack.mean(axis=0)])


class SubboxClassifier:
    """Linear classifier over the tripled sub-box feature.

    Warm-started from the network head so that before any training its
    scores equal the head's scores on the root feature exactly; training
    then lets the quadrant context move them.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent classifier shapes")

    @classmethod
    def warm_start(cls, net) -> "SubboxClassifier":
        w = net.params["head.weights"]
        k, f = w.shape
        weights = np.concatenate([w, np.zeros((k, 2 * f))], axis=1)
        return cls(weights, net.params["head.bias"].copy())

    def predict(self, feature: np.ndarray) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)
        if f.ndim == 1:
            return self.weights @ f + self.bias
        return f @ self.weights.T + self.bias

    def fit(self, features: np.ndarray, labels: Sequence[int], rng,
            epochs: int = 4, lr: float = 0.01, loss: Optional[LossKind] = None):
        """SGD on the multi-class hinge over labelled sub-box features."""
        loss = loss or LossKind.hinge()
        feats = np.asarray(features, dtype=np.float64)
        n = feats.shape[0]
        for _epoch in range(epochs):
            for i in rng.permutation(n):
                fc = FcLayer(self.weights, self.bias)
                scores, cache = fc.forward(feats[i])
                _loss_val, dscores = loss_forward_backward(scores, int(labels[i]), loss)
                _dx, grads = fc.backward(cache, dscores)
                self.weights -= lr * grads["weights"]
                self.bias -= lr * grads["bias"]
        return self


# ---------------------------------------------------------------------------
# Stage 4: context fusion


def make_context_scorer(net) -> Callable[[np.ndarray], np.ndarray]:
    """Whole-image scorer: warp the full frame to the net input and run it."""
    def scorer(image: np.ndarray) -> np.ndarray:
        c, h, w = image.shape
        crop = crop_resize(image, (0.0, 0.0, float(w), float(h)),
                           net.config.input_shape[1:])
        scores, _cache = net.forward(crop)
        return scores
    return scorer


class ContextFusion:
    """Per-class linear rescoring over detector + whole-image scores.

    Class ``k`` owns a one-vs-rest linear classifier on the concatenated
    vector ``[detector scores, context scores]``, warm-started at the
    identity (unit weight on its own detector score, zero elsewhere), so
    an untrained fusion returns the detector scores unchanged.
    """

    def __init__(self, num_classes: int, num_context: int):
        self.num_classes = int(num_classes)
        self.num_context = int(num_context)
        dim = self.num_classes + self.num_context
        self.weights = np.zeros((self.num_classes, dim))
        for k in range(self.num_classes):
            self.weights[k, k] = 1.0
        self.bias = np.zeros(self.num_classes)
        self.trained = [False] * self.num_classes

    def context_weight(self, class_id: int, context_id: int) -> float:
        """Learned weight tying context channel to class score."""
        return float(self.weights[class_id, self.num_classes + context_id])

    def apply(self, det_scores: np.ndarray, ctx_scores: np.ndarray) -> np.ndarray:
        det = np.asarray(det_scores, dtype=np.float64)
        ctx = np.asarray(ctx_scores, dtype=np.float64)
        if det.ndim == 1:
            x = np.concatenate([det, ctx])
            return self.weights @ x + self.bias
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (det.shape[0], ctx.shape[0]))
        x = np.concatenate([det, ctx], axis=1)
        return x @ self.weights.T + self.bias

    def fit(self, det_scores: np.ndarray, ctx_scores: np.ndarray,
            labels: Sequence[int], rng, epochs: int = 6, lr: float = 0.02,
            margin: float = 1.0, context_only: bool = True):
        """Per-class one-vs-rest hinge SGD.

        With ``context_only`` (the default) the detector-score block of
        each row stays frozen at its identity warm start and only the
        context weights and bias move, so fusion is a context-driven
        per-class offset that cannot scramble the detector's ranking.
        A class with no positive example in ``labels`` is skipped with a
        warning and keeps its identity row, so fusion never degrades a
        class it could not learn about.
        """
        det = np.asarray(det_scores, dtype=np.float64)
        ctx = np.asarray(ctx_scores, dtype=np.float64)
        x = np.concatenate([det, ctx], axis=1)
        y = np.asarray(labels, dtype=np.int64)
        n = x.shape[0]
        k_det = self.num_classes
        for k in range(self.num_classes):
            targets = np.where(y == k, 1.0, -1.0)
            if not (targets > 0).any():
                warnings.warn("context fusion: class %d has no positives; skipping" % k)
                continue
            w = self.weights[k].copy()
            b = float(self.bias[k])
            for _epoch in range(epochs):
                for i in rng.permutation(n):
                    t = targets[i]
                    s = float(w @ x[i]) + b
                    if margin - t * s > 0.0:
                        step = lr * t * x[i]
                        if context_only:
                            w[k_det:] += step[k_det:]
                        else:
                            w += step
                        b += lr * t
            self.weights[k] = w
            self.bias[k] = b
            self.trained[k] = True
        return self


# ---------------------------------------------------------------------------
# Stage 5: box refinement


def regression_targets(src: BoundingBox, gt: BoundingBox) -> np.ndarray:
    """Normalised offsets from a source box to its ground-truth box."""
    scx, scy = (src.x1 + src.x2) / 2.0, (src.y1 + src.y2) / 2.0
    gcx, gcy = (gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0
    return np.array([
        (gcx - scx) / src.width,
        (gcy - scy) / src.height,
        math.log(gt.width / src.width),
        math.log(gt.height / src.height),
    ])


class BoxRegressor:
    """Ridge-regression box refinement on the penultimate feature.

    Predicts centre shifts in box-size units and log size ratios; the
    closed-form normal equations keep fitting deterministic.  Applying
    the regressor clamps the result to the image and falls back to the
    input box (with a logged warning) if the prediction is not finite.
    """

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)  # [F + 1, 4]
        if self.weights.ndim != 2 or self.weights.shape[1] != 4:
            raise ValueError("regressor weights must be [F + 1, 4]")

    @classmethod
    def fit(cls, features: np.ndarray, src_boxes: Sequence[BoundingBox],
            gt_boxes: Sequence[BoundingBox], l2: float = 1.0) -> "BoxRegressor":
        feats = np.asarray(features, dtype=np.float64)
        if not (len(feats) == len(src_boxes) == len(gt_boxes)):
            raise ValueError("feature/box count mismatch")
        if len(feats) == 0:
            raise ValueError("cannot fit a regressor on zero examples")
        x = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
        y = np.stack([regression_targets(s, g) for s, g in zip(src_boxes, gt_boxes)])
        gram = x.T @ x + l2 * np.eye(x.shape[1])
        return cls(np.linalg.solve(gram, x.T @ y))

    def apply(self, feature: np.ndarray, box: BoundingBox,
              image_w: float, image_h: float) -> BoundingBox:
        x = np.concatenate([np.asarray(feature, dtype=np.float64), [1.0]])
        t = x @ self.weights
        if not np.isfinite(t).all():
            logger.warning("box refinement produced non-finite offsets; keeping box")
            return box
        cx = (box.x1 + box.x2) / 2.0 + t[0] * box.width
        cy = (box.y1 + box.y2) / 2.0 + t[1] * box.height
        w = box.width * math.exp(min(max(t[2], -2.0), 2.0))
        h = box.height * math.exp(min(max(t[3], -2.0), 2.0))
        try:
            return BoundingBox(cx - w / 2.0, cy - h / 2.0,
                               cx + w / 2.0, cy + h / 2.0).clamp(image_w, image_h)
        except ValueError:
            logger.warning("box refinement produced a degenerate box; keeping box")
            return box


# ---------------------------------------------------------------------------
# Stage 6: non-maximum suppression


def _ranked(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def nms(dets: Sequence[Detection], iou_threshold: float = NMS_THRESHOLD) -> List[Detection]:
    """Greedy same-class suppression in rank order.

    Walking detections by descending confidence (ties by input index),
    each detection is kept unless it overlaps an already-kept detection
    of the same class on the same image with IoU above the threshold.
    """
    order = _ranked(dets)
    kept_idx: List[int] = []
    for i in order:
        d = dets[i]
        suppressed = False
        for j in kept_idx:
            k = dets[j]
            if (k.class_id == d.class_id and k.image_id == d.image_id
                    and iou(k.box, d.box) > iou_threshold):
                suppressed = True
                break
        if not suppressed:
            kept_idx.append(i)
    return [dets[i] for i in kept_idx]


def nms_bruteforce(dets: Sequence[Detection],
                   iou_threshold: float = NMS_THRESHOLD) -> List[Detection]:
    """Quadratic restatement of :func:`nms` used as its test oracle.

    For every detection, re-derive from scratch whether any higher
    ranked detection that itself survives would suppress it.
    """
    order = _ranked(dets)
    rank = {i: r for r, i in enumerate(order)}
    memo: Dict[int, bool] = {}

    def survives(i: int) -> bool:
        if i in memo:
            return memo[i]
        d = dets[i]
        alive = True
        for j in order:
            if rank[j] >= rank[i]:
                break
            k = dets[j]
            if (k.class_id == d.class_id and k.image_id == d.image_id
                    and survives(j) and iou(k.box, d.box) > iou_threshold):
                alive = False
                break
        memo[i] = alive
        return alive

    return [dets[i] for i in order if survives(i)]


# ---------------------------------------------------------------------------
# Stage composition


@dataclass
class DetectOptions:
    """Which pipeline stages run, and their knobs.

    ``subbox``, ``context`` and ``refine`` are off unless their models
    are supplied; rejection and NMS default on.  ``first_pass`` names
    the cheap model whose scores drive rejection (the main model is
    used when absent).
    """

    rejection: bool = True
    rejection_threshold: float = REJECTION_THRESHOLD
    first_pass: Optional[object] = None
    subbox: Optional[SubboxClassifier] = None
    context_scorer: Optional[Callable[[np.ndarray], np.ndarray]] = None
    context_fusion: Optional[ContextFusion] = None
    refine: Optional[BoxRegressor] = None
    nms: bool = True
    nms_threshold: float = NMS_THRESHOLD


@dataclass
class DetectResult:
    detections: List[Detection]
    proposals_in: int
    proposals_scored: int


def detect(image: np.ndarray, image_id: str, net,
           boxes: Sequence[BoundingBox],
           options: Optional[DetectOptions] = None) -> DetectResult:
    """Run the staged pipeline over candidate boxes of one image."""
    opts = options or DetectOptions()
    c, h, w = image.shape
    boxes = [b.clamp(w, h) for b in boxes]
    n_in = len(boxes)

    ids = list(range(len(boxes)))
    if opts.rejection:
        fp_net = opts.first_pass if opts.first_pass is not None else net
        fp_scores, _fp_feats = score_boxes(fp_net, image, boxes)
        scored = [ScoredProposal(i, b, fp_scores[i]) for i, b in zip(ids, boxes)]
        kept, _rejected = reject_proposals(scored, opts.rejection_threshold)
        ids = [p.source_id for p in kept]
        boxes = [p.box for p in kept]

    if not boxes:
        return DetectResult([], n_in, 0)

    scores, feats = score_boxes(net, image, boxes)
    store = {pid: feats[i] for i, pid in enumerate(ids)}

    if opts.subbox is not None:
        pairs = list(zip(ids, boxes))
        tripled = np.stack([
            subbox_features(pid, box, pairs, store)
            for pid, box in pairs
        ])
        scores = opts.subbox.predict(tripled)

    # Fusion rescored confidences must not relabel a detection: the class
    # comes from the detector scores, context only moves the confidence.
    class_scores = scores
    if opts.context_fusion is not None and opts.context_scorer is not None:
        ctx = opts.context_scorer(image)
        scores = opts.context_fusion.apply(scores, ctx)

    dets: List[Detection] = []
    for i, (pid, box) in enumerate(zip(ids, boxes)):
        cls = int(np.argmax(class_scores[i]))
        conf = float(scores[i, cls])
        out_box = box
        if opts.refine is not None:
            out_box = opts.refine.apply(store[pid], box, w, h)
        dets.append(Detection(image_id=image_id, box=out_box,
                              class_id=cls, confidence=conf))

    if opts.nms:
        dets = nms(dets, opts.nms_threshold)
    dets.sort(key=lambda d: -d.confidence)
    return DetectResult(dets, n_in, len(boxes))


# ---------------------------------------------------------------------------
# Labelling helper shared by the aux-model trainers


def label_boxes(boxes: Sequence[BoundingBox],
                gt_entries: Sequence[Tuple[object, int]],
                iou_threshold: float = 0.5):
    """Assign each box the class of its best ground-truth match.

    Returns ``(labels, matched_gt_boxes)`` where the label is -1 for
    background (below-threshold overlap) and ``matched_gt_boxes[i]`` is
    the matching ground-truth box or ``None``.  Matching here is
    independent per box — this feeds classifier training, not metrics.
    """
    labels: List[int] = []
    matches: List[Optional[BoundingBox]] = []
    for b in boxes:
        best_iou = 0.0
        best = None
        for gt_box, cls in gt_entries:
            overlap = iou(b, gt_box)
            if overlap > best_iou:
                best_iou = overlap
                best = (gt_box, cls)
        if best is not None and best_iou >= iou_threshold:
            labels.append(int(best[1]))
            matches.append(BoundingBox(best[0].x1, best[0].y1, best[0].x2, best[0].y2))
        else:
            labels.append(-1)
            matches.append(None)
    return labels, matches


# ---------------------------------------------------------------------------
# JSONL record I/O


def save_proposals(path, proposals_by_image: Mapping[str, Sequence],
                   scores_by_image: Optional[Mapping[str, Sequence]] = None) -> None:
    """Write one ``{"image_id", "box"[, "scores"]}`` JSON line per box."""
    with open(path, "w") as fh:
        for image_id in sorted(proposals_by_image):
            entries = proposals_by_image[image_id]
            img_scores = scores_by_image.get(image_id) if scores_by_image else None
            for i, box in enumerate(entries):
                if isinstance(box, BoundingBox):
                    box = box.to_list()
                rec = {"image_id": image_id, "box": [float(v) for v in box]}
                if img_scores is not None:
                    rec["scores"] = [float(v) for v in img_scores[i]]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_proposals(path) -> Dict[str, List[Tuple[BoundingBox, Optional[np.ndarray]]]]:
    out: Dict[str, List[Tuple[BoundingBox, Optional[np.ndarray]]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError("line %d: not valid JSON (%s)" % (lineno, exc))
            if not isinstance(rec, dict) or "image_id" not in rec or "box" not in rec:
                raise RecordFormatError("line %d: need image_id and box" % lineno)
            extra = set(rec) - {"image_id", "box", "scores"}
            if extra:
                raise RecordFormatError("line %d: unknown keys %r" % (lineno, sorted(extra)))
            try:
                box = BoundingBox.from_seq(rec["box"])
            except (TypeError, ValueError) as exc:
                raise RecordFormatError("line %d: bad box (%s)" % (lineno, exc))
            scores = None
            if "scores" in rec:
                scores = np.asarray(rec["scores"], dtype=np.float64)
                if scores.ndim != 1 or not np.isfinite(scores).all():
                    raise RecordFormatError("line %d: scores must be finite" % lineno)
            out.setdefault(rec["image_id"], []).append((box, scores))
    return out


# ---------------------------------------------------------------------------
# Auxiliary stage bundle


@dataclass
class AuxBundle:
    """The trained stage models the detect command can load as one file.

    Any component may be absent; the corresponding stage simply stays
    off.  Model members are embedded as full model documents so the
    bundle is self-contained.
    """

    rejection_threshold: float = REJECTION_THRESHOLD
    first_pass: Optional[object] = None      # a network, or None
    subbox: Optional[SubboxClassifier] = None
    context_net: Optional[object] = None     # a network, or None
    context_fusion: Optional[ContextFusion] = None
    regressor: Optional[BoxRegressor] = None

    def to_options(self, **overrides) -> DetectOptions:
        """DetectOptions with every available stage enabled."""
        opts = DetectOptions(
            rejection_threshold=self.rejection_threshold,
            first_pass=self.first_pass,
            subbox=self.subbox,
            context_scorer=(make_context_scorer(self.context_net)
                            if self.context_net is not None else None),
            context_fusion=self.context_fusion,
            refine=self.regressor,
        )
        for key, value in overrides.items():
            setattr(opts, key, value)
        return opts


def save_aux_bundle(bundle: AuxBundle, path) -> None:
    from .network import model_to_doc
    from .tensorio import format_tensor

    doc: Dict[str, object] = {"version": 1,
                              "rejection_threshold": bundle.rejection_threshold}
    if bundle.first_pass is not None:
        doc["first_pass"] = model_to_doc(bundle.first_pass)
    if bundle.subbox is not None:
        doc["subbox"] = {"weights": format_tensor(bundle.subbox.weights),
                         "bias": format_tensor(bundle.subbox.bias)}
    if bundle.context_net is not None and bundle.context_fusion is not None:
        doc["context"] = {
            "model": model_to_doc(bundle.context_net),
            "fusion": {
                "weights": format_tensor(bundle.context_fusion.weights),
                "bias": format_tensor(bundle.context_fusion.bias),
                "num_classes": bundle.context_fusion.num_classes,
                "num_context": bundle.context_fusion.num_context,
            },
        }
    if bundle.regressor is not None:
        doc["regressor"] = {"weights": format_tensor(bundle.regressor.weights)}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_aux_bundle(path) -> AuxBundle:
    from .network import ModelFormatError, ModelVersionError, model_from_doc
    from .tensorio import TensorRecordError, parse_tensor

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AuxBundleError("bundle is not valid JSON: %s" % exc)
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise AuxBundleError("bundle missing version 1 marker")
    known = {"version", "rejection_threshold", "first_pass", "subbox",
             "context", "regressor"}
    extra = set(doc) - known
    if extra:
        raise AuxBundleError("bundle has unknown keys %r" % sorted(extra))
    bundle = AuxBundle()
    try:
        if "rejection_threshold" in doc:
            bundle.rejection_threshold = float(doc["rejection_threshold"])
        if "first_pass" in doc:
            bundle.first_pass = model_from_doc(doc["first_pass"])
        if "subbox" in doc:
            bundle.subbox = SubboxClassifier(parse_tensor(doc["subbox"]["weights"]),
                                             parse_tensor(doc["subbox"]["bias"]))
        if "context" in doc:
            net = model_from_doc(doc["context"]["model"])
            raw = doc["context"]["fusion"]
            fusion = ContextFusion(int(raw["num_classes"]), int(raw["num_context"]))
            weights = parse_tensor(raw["weights"])
            bias = parse_tensor(raw["bias"])
            if weights.shape != fusion.weights.shape or bias.shape != fusion.bias.shape:
                raise AuxBundleError("fusion tensor shapes disagree with its sizes")
            fusion.weights = weights
            fusion.bias = bias
            bundle.context_net = net
            bundle.context_fusion = fusion
        if "regressor" in doc:
            bundle.regressor = BoxRegressor(parse_tensor(doc["regressor"]["weights"]))
    except (KeyError, TypeError, ValueError, TensorRecordError,
            ModelFormatError, ModelVersionError) as exc:
        if isinstance(exc, AuxBundleError):
            raise
        raise AuxBundleError("bad bundle contents: %s" % exc)
    return bundle


def save_detections(path, dets: Sequence[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            rec = {"image_id": d.image_id, "box": d.box.to_list(),
                   "class_id": int(d.class_id), "confidence": float(d.confidence)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_detections(path) -> List[Detection]:
    out: List[Detection] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError("line %d: not valid JSON (%s)" % (lineno, exc))
            required = {"image_id", "box", "class_id", "confidence"}
            if not isinstance(rec, dict) or set(rec) != required:
                raise RecordFormatError("line %d: record keys must be %r"
                                        % (lineno, sorted(required)))
            if not isinstance(rec["class_id"], int):
                raise RecordFormatError("line %d: class_id must be an integer" % lineno)
            if not (isinstance(rec["confidence"], (int, float))
                    and math.isfinite(rec["confidence"])):
                raise RecordFormatError("line %d: confidence must be finite" % lineno)
            try:
                box = BoundingBox.from_seq(rec["box"])
            except (TypeError, ValueError) as exc:
                raise RecordFormatError("line %d: bad box (%s)" % (lineno, exc))
            out.append(Detection(image_id=rec["image_id"], box=box,
                                 class_id=rec["class_id"],
                                 confidence=float(rec["confidence"])))
    return out
