"""End-to-end ablation harness: train models, assemble pipeline variants,
and measure mAP per configuration on a synthetic split.

One run generates its own train/val data, trains a deformation-pooling
model and a plain-pooling baseline on object crops, fits the auxiliary
stage models (first-pass rejector, sub-box classifier, scene-context
net + fusion, box regressor), scores the validation proposals once per
scorer, and then evaluates every pipeline configuration by reassembling
detections from those cached scores.  The per-configuration rows land
in a CSV of ``seed, config, map, proposals_scored, recall`` lines.

The rejection threshold is calibrated per run: candidate thresholds are
taken as quantiles of the first-pass scores on a held-back slice of the
train split, and the most aggressive one whose proposal recall drop
stays inside the declared budget wins.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pipeline as pl
from .data import (ProposalPolicy, SceneSpec, generate_dataset, generate_proposals)
from .evaluation import mean_ap, proposal_recall
from .imageops import read_image
from .network import DefBranchConfig, NetworkConfig, build_network
from .trainer import FreezeMask, SgdConfig, train_phase
from .util import rng_for

__all__ = ["AblateConfig", "SeedReport", "run_ablation", "write_ablation_csv",
           "load_split_images", "build_crop_samples", "fit_stage_models"]


@dataclass
class AblateConfig:
    """Sizes and knobs for one ablation run.

    The default model configs are trimmed relative to the package-wide
    defaults (smaller part filters/channels) so a five-seed sweep over
    a couple of thousand images stays inside a desk-scale time budget.
    """

    train_images: int = 2000
    val_images: int = 500
    crop_images: int = 800        # train images actually mined for crops
    aux_images: int = 250         # train images used to fit the stage models
    scene_images: int = 500       # train images for the context scene net
    negatives_per_image: int = 1  # background crops added per mined image
    crop_jitter: float = 0.22     # train-crop misalignment, matching proposals
    epochs: int = 2
    learning_rate: float = 0.01
    max_recall_drop: float = 0.08
    reject_quantiles: Tuple[float, ...] = (0.7, 0.65, 0.6, 0.55, 0.5)
    scene_spec: SceneSpec = field(default_factory=SceneSpec)
    proposal_policy: ProposalPolicy = field(default_factory=ProposalPolicy)
    def_config: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        fc_width=48,
        def_branch=DefBranchConfig(filter_sizes=(3, 5, 7), channels=10)))
    baseline_config: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        fc_width=48, def_branch=DefBranchConfig(enabled=False)))
    first_pass_config: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        trunk_channels=(6, 12), fc_width=32,
        def_branch=DefBranchConfig(enabled=False)))
    context_config: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        trunk_channels=(6, 12), fc_width=32, num_classes=3,
        def_branch=DefBranchConfig(enabled=False)))


@dataclass
class SeedReport:
    seed: int
    rows: List[Tuple[str, float]]                 # (config name, mAP)
    proposals_total: int
    proposals_kept: int
    recall_full: float
    recall_kept: float
    rejection_threshold: float
    context_weights: Dict[Tuple[str, int], float]  # banned (scene, class) -> weight
    elapsed_s: float

    def row_map(self) -> Dict[str, float]:
        return dict(self.rows)


def load_split_images(manifest, root) -> Dict[str, np.ndarray]:
    return {rec.id: read_image(os.path.join(root, rec.path))
            for rec in manifest.records}


def build_crop_samples(manifest, images, input_hw, rng,
                       negatives_per_image: int = 1,
                       max_images: Optional[int] = None,
                       label: str = "fine",
                       box_jitter: float = 0.0):
    """Object crops (plus random background crops) as (x, label) pairs.

    ``label='fine'`` keeps class ids; ``label='coarse'`` collapses them
    to circle-bearing vs not, which is the smaller source label set used
    by the transfer schedules.  ``box_jitter`` perturbs each object box
    by that fraction of its size before cropping, matching the
    misalignment proposal boxes carry at scoring time.
    """
    from .data import CIRCLE_CLASSES
    samples = []
    records = manifest.records if max_images is None else manifest.records[:max_images]
    for rec in records:
        image = images[rec.id]
        c, h, w = image.shape
        for obj in rec.objects:
            box = pl.BoundingBox.from_seq(obj["box"])
            if box_jitter > 0.0:
                bw, bh = box.width, box.height
                dx1, dx2 = rng.uniform(-box_jitter, box_jitter, 2) * bw
                dy1, dy2 = rng.uniform(-box_jitter, box_jitter, 2) * bh
                box = pl.BoundingBox(box.x1 + dx1, box.y1 + dy1,
                                     box.x2 + dx2, box.y2 + dy2)
            box = box.clamp(w, h)
            crop = pl.crop_resize(image, (box.x1, box.y1, box.x2, box.y2), input_hw)
            cls = int(obj["class_id"])
            if label == "coarse":
                cls = 1 if cls in CIRCLE_CLASSES else 0
            samples.append((crop, cls))
        for _ in range(negatives_per_image):
            bw = float(rng.uniform(8, 0.5 * w))
            bh = float(rng.uniform(8, 0.5 * h))
            x1 = float(rng.uniform(0, w - bw))
            y1 = float(rng.uniform(0, h - bh))
            neg = pl.BoundingBox(x1, y1, x1 + bw, y1 + bh)
            overlap = max((pl.iou(neg, pl.BoundingBox.from_seq(o["box"]))
                           for o in rec.objects), default=0.0)
            if overlap < 0.25:
                crop = pl.crop_resize(image, (neg.x1, neg.y1, neg.x2, neg.y2), input_hw)
                samples.append((crop, -1))
    return samples


def _train_model(config: NetworkConfig, samples, seed: int, epochs: int, lr: float,
                 label: str):
    net = build_network(config, seed)
    cfg = SgdConfig(learning_rate=lr, epochs=epochs, seed=seed)
    train_phase(net, samples, cfg, FreezeMask.train_all(), label,
                loss_kind=config.loss)
    return net


def _scene_samples(manifest, images, input_hw, scene_types, max_images):
    samples = []
    for rec in manifest.records[:max_images]:
        image = images[rec.id]
        c, h, w = image.shape
        crop = pl.crop_resize(image, (0.0, 0.0, float(w), float(h)), input_hw)
        samples.append((crop, scene_types.index(rec.scene_type)))
    return samples


def _score_split(net, images, proposals) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Score every proposal box of every image once; cache scores+features."""
    out = {}
    for image_id in sorted(proposals):
        boxes = [pl.BoundingBox.from_seq(b) for b in proposals[image_id]]
        image = images[image_id]
        c, h, w = image.shape
        boxes = [b.clamp(w, h) for b in boxes]
        out[image_id] = pl.score_boxes(net, images[image_id], boxes)
    return out


def _calibrate_rejection(first_scores: Dict[str, np.ndarray],
                         proposals, ground_truth,
                         quantiles: Sequence[float],
                         max_recall_drop: float) -> float:
    """Pick the most aggressive quantile threshold within the recall budget."""
    all_max = np.concatenate([s.max(axis=1) for s in first_scores.values()])
    base_boxes = {iid: [pl.BoundingBox.from_seq(b) for b in proposals[iid]]
                  for iid in proposals}
    base_recall = proposal_recall(base_boxes, ground_truth)
    chosen = pl.REJECTION_THRESHOLD
    for q in quantiles:
        t = float(np.quantile(all_max, q))
        kept_boxes = {
            iid: [b for b, m in zip(base_boxes[iid], first_scores[iid].max(axis=1))
                  if m >= t]
            for iid in base_boxes
        }
        recall = proposal_recall(kept_boxes, ground_truth)
        if base_recall - recall <= max_recall_drop:
            chosen = t
            break
    return chosen


def fit_stage_models(def_net, first_net, ctx_net, aux_man, images, policy,
                     seed: int,
                     reject_quantiles: Sequence[float] = (0.7, 0.65, 0.6, 0.55, 0.5),
                     max_recall_drop: float = 0.08,
                     subbox_epochs: int = 3, subbox_lr: float = 0.005):
    """Fit the four auxiliary stage models on one manifest slice.

    Scores the slice's proposals with the main model once, labels them
    against ground truth, and fits the sub-box classifier (warm-started
    from the head), the context fusion, the box regressor, and the
    calibrated rejection threshold for the first-pass model.  Returns
    ``(subbox, fusion, regressor, threshold)``.
    """
    aux_props = generate_proposals(aux_man, policy, seed=seed + 1)
    aux_gt = aux_man.ground_truth()
    aux_cache = _score_split(def_net, images, aux_props)
    aux_first = {
        iid: pl.score_boxes(first_net, images[iid],
                            [pl.BoundingBox.from_seq(b) for b in aux_props[iid]])[0]
        for iid in aux_props
    }
    ctx_scorer = pl.make_context_scorer(ctx_net)
    aux_ctx = {iid: ctx_scorer(images[iid]) for iid in aux_props}

    label_rows, tri_rows, ctx_rows = [], [], []
    reg_feats, reg_src, reg_gt = [], [], []
    for iid in sorted(aux_props):
        image = images[iid]
        _c, h, w = image.shape
        boxes = [pl.BoundingBox.from_seq(b).clamp(w, h) for b in aux_props[iid]]
        _scores, feats = aux_cache[iid]
        labels, matches = pl.label_boxes(boxes, aux_gt[iid])
        store = {j: feats[j] for j in range(len(boxes))}
        pairs = list(zip(range(len(boxes)), boxes))
        for j, box in enumerate(boxes):
            tri_rows.append(pl.subbox_features(j, box, pairs, store))
            label_rows.append(labels[j])
            ctx_rows.append(aux_ctx[iid])
            if matches[j] is not None:
                reg_feats.append(feats[j])
                reg_src.append(box)
                reg_gt.append(matches[j])

    subbox = pl.SubboxClassifier.warm_start(def_net)
    tri = np.stack(tri_rows)
    subbox.fit(tri, label_rows, rng_for(seed, "ablate.subbox"),
               epochs=subbox_epochs, lr=subbox_lr)
    # Fusion sees sub-box scores downstream, so train it on those rather
    # than on the raw detector outputs.
    fused_det = subbox.predict(tri)
    fusion = pl.ContextFusion(def_net.config.num_classes,
                              ctx_net.config.num_classes)
    fusion.fit(fused_det, np.stack(ctx_rows), label_rows,
               rng_for(seed, "ablate.fusion"))
    regressor = pl.BoxRegressor.fit(np.stack(reg_feats), reg_src, reg_gt, l2=1.0)
    threshold = _calibrate_rejection(aux_first, aux_props, aux_gt,
                                     reject_quantiles, max_recall_drop)
    return subbox, fusion, regressor, threshold


def _assemble(image_ids, boxes_by_image, scores_by_image, feats_by_image,
              *, subbox=None, fusion=None, ctx_by_image=None, regressor=None,
              keep_by_image=None, image_hw=(40, 40), use_nms=True,
              nms_threshold=pl.NMS_THRESHOLD):
    """Build detections for one pipeline variant from cached arrays."""
    dets = []
    h, w = image_hw
    for image_id in image_ids:
        boxes = boxes_by_image[image_id]
        scores = scores_by_image[image_id]
        feats = feats_by_image[image_id]
        keep = (keep_by_image[image_id] if keep_by_image is not None
                else list(range(len(boxes))))
        if not keep:
            continue
        kept_boxes = [boxes[i] for i in keep]
        kept_scores = scores[keep]
        kept_feats = feats[keep]
        if subbox is not None:
            store = {pid: kept_feats[j] for j, pid in enumerate(keep)}
            pairs = list(zip(keep, kept_boxes))
            tripled = np.stack([
                pl.subbox_features(pid, box, pairs, store) for pid, box in pairs
            ])
            kept_scores = subbox.predict(tripled)
        class_scores = kept_scores  # fusion rescores, never relabels
        if fusion is not None:
            kept_scores = fusion.apply(kept_scores, ctx_by_image[image_id])
        img_dets = []
        for j in range(len(kept_boxes)):
            cls = int(np.argmax(class_scores[j]))
            conf = float(kept_scores[j, cls])
            out_box = kept_boxes[j]
            if regressor is not None:
                out_box = regressor.apply(kept_feats[j], out_box, w, h)
            img_dets.append(pl.Detection(image_id=image_id, box=out_box,
                                         class_id=cls, confidence=conf))
        if use_nms:
            img_dets = pl.nms(img_dets, nms_threshold)
        dets.extend(img_dets)
    return dets


def run_ablation(seed: int, out_dir, cfg: Optional[AblateConfig] = None,
                 verbose: bool = False) -> SeedReport:
    """Run the complete train/score/assemble/evaluate cycle for one seed."""
    cfg = cfg or AblateConfig()
    t_start = time.time()
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    def say(msg):
        if verbose:
            print("[seed %d] %s" % (seed, msg), flush=True)

    say("generating data")
    manifests = generate_dataset(cfg.scene_spec,
                                 {"train": cfg.train_images, "val": cfg.val_images},
                                 seed=seed, out_dir=out_dir)
    train_man, val_man = manifests["train"], manifests["val"]
    train_images = load_split_images(train_man, out_dir)
    val_images = load_split_images(val_man, out_dir)
    val_gt = val_man.ground_truth()
    input_hw = cfg.def_config.input_shape[1:]

    say("building crop samples")
    crop_rng = rng_for(seed, "ablate.crops")
    samples = build_crop_samples(train_man, train_images, input_hw, crop_rng,
                                 negatives_per_image=cfg.negatives_per_image,
                                 max_images=cfg.crop_images,
                                 box_jitter=cfg.crop_jitter)

    say("training deformation model (%d samples)" % len(samples))
    def_net = _train_model(cfg.def_config, samples, seed, cfg.epochs,
                           cfg.learning_rate, "ablate-def")
    say("training plain-pooling baseline")
    base_net = _train_model(cfg.baseline_config, samples, seed, cfg.epochs,
                            cfg.learning_rate, "ablate-baseline")
    say("training first-pass rejector")
    first_net = _train_model(cfg.first_pass_config, samples, seed, cfg.epochs,
                             cfg.learning_rate, "ablate-first")
    say("training scene context net")
    scene_samples = _scene_samples(train_man, train_images, input_hw,
                                   cfg.scene_spec.scene_types, cfg.scene_images)
    ctx_net = _train_model(cfg.context_config, scene_samples, seed, cfg.epochs,
                           cfg.learning_rate, "ablate-context")

    # ----- auxiliary stage models on a held-back slice of the train split
    say("fitting stage models")
    aux_records = train_man.records[-cfg.aux_images:]
    aux_man = replace(train_man, records=list(aux_records))
    subbox, fusion, regressor, threshold = fit_stage_models(
        def_net, first_net, ctx_net, aux_man, train_images,
        cfg.proposal_policy, seed,
        reject_quantiles=cfg.reject_quantiles,
        max_recall_drop=cfg.max_recall_drop)
    say("rejection threshold %.4f" % threshold)

    # ----- validation split: score once per scorer, then assemble variants
    say("scoring validation proposals")
    val_props = generate_proposals(val_man, cfg.proposal_policy, seed=seed)
    val_ids = sorted(val_props)
    boxes_by_image = {}
    h_img, w_img = cfg.scene_spec.image_size
    for iid in val_ids:
        boxes_by_image[iid] = [pl.BoundingBox.from_seq(b).clamp(w_img, h_img)
                               for b in val_props[iid]]
    def_cache = _score_split(def_net, val_images, val_props)
    base_cache = _score_split(base_net, val_images, val_props)
    first_scores = {iid: pl.score_boxes(first_net, val_images[iid],
                                        boxes_by_image[iid])[0] for iid in val_ids}
    ctx_scorer = pl.make_context_scorer(ctx_net)
    ctx_by_image = {iid: ctx_scorer(val_images[iid]) for iid in val_ids}

    def_scores = {iid: def_cache[iid][0] for iid in val_ids}
    def_feats = {iid: def_cache[iid][1] for iid in val_ids}
    base_scores = {iid: base_cache[iid][0] for iid in val_ids}
    base_feats = {iid: base_cache[iid][1] for iid in val_ids}

    keep_by_image = {
        iid: [j for j, m in enumerate(first_scores[iid].max(axis=1))
              if m >= threshold]
        for iid in val_ids
    }

    def eval_rows(dets):
        value, _per = mean_ap(dets, val_gt)
        return value

    say("assembling configurations")
    common = dict(image_hw=(h_img, w_img))
    rows: List[Tuple[str, float]] = []
    rows.append(("baseline", eval_rows(_assemble(
        val_ids, boxes_by_image, base_scores, base_feats, **common))))
    rows.append(("defpool", eval_rows(_assemble(
        val_ids, boxes_by_image, def_scores, def_feats, **common))))
    rows.append(("defpool+subbox", eval_rows(_assemble(
        val_ids, boxes_by_image, def_scores, def_feats, subbox=subbox, **common))))
    rows.append(("defpool+subbox+context", eval_rows(_assemble(
        val_ids, boxes_by_image, def_scores, def_feats, subbox=subbox,
        fusion=fusion, ctx_by_image=ctx_by_image, **common))))
    rows.append(("defpool+subbox+context+refine", eval_rows(_assemble(
        val_ids, boxes_by_image, def_scores, def_feats, subbox=subbox,
        fusion=fusion, ctx_by_image=ctx_by_image, regressor=regressor, **common))))
    rows.append(("full", eval_rows(_assemble(
        val_ids, boxes_by_image, def_scores, def_feats, subbox=subbox,
        fusion=fusion, ctx_by_image=ctx_by_image, regressor=regressor,
        keep_by_image=keep_by_image, **common))))

    total = sum(len(v) for v in boxes_by_image.values())
    kept = sum(len(v) for v in keep_by_image.values())
    recall_full = proposal_recall(boxes_by_image, val_gt)
    kept_boxes = {iid: [boxes_by_image[iid][j] for j in keep_by_image[iid]]
                  for iid in val_ids}
    recall_kept = proposal_recall(kept_boxes, val_gt)

    banned = {}
    for scene, cls in cfg.scene_spec.banned_pairs():
        scene_idx = cfg.scene_spec.scene_types.index(scene)
        banned[(scene, cls)] = fusion.context_weight(cls, scene_idx)

    report = SeedReport(
        seed=seed, rows=rows, proposals_total=total, proposals_kept=kept,
        recall_full=recall_full, recall_kept=recall_kept,
        rejection_threshold=threshold, context_weights=banned,
        elapsed_s=time.time() - t_start,
    )
    say("done in %.1fs: %s" % (report.elapsed_s,
                               ", ".join("%s=%.3f" % r for r in rows)))
    return report


def write_ablation_csv(path, reports: Sequence[SeedReport]) -> None:
    """``seed, config, map, proposals_scored, recall`` rows plus context columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "config", "map", "proposals_scored", "recall"])
        for rep in reports:
            for name, value in rep.rows:
                scored = rep.proposals_kept if name == "full" else rep.proposals_total
                recall = rep.recall_kept if name == "full" else rep.recall_full
                writer.writerow([rep.seed, name, "%.6f" % value, scored,
                                 "%.6f" % recall])
        writer.writerow([])
        writer.writerow(["seed", "banned_scene", "banned_class", "context_weight"])
        for rep in reports:
            for (scene, cls), wt in sorted(rep.context_weights.items()):
                writer.writerow([rep.seed, scene, cls, "%.6f" % wt])
