"""Command-line front end.

One executable, subcommand per stage of the workflow: generate data,
train models, run detection, evaluate, select ensembles, and run the
self-check suites.  Exit codes are stable so scripts can branch on them:

    0  success
    2  bad command line (argparse)
    3  a referenced file is missing
    4  a file exists but violates its schema
    5  a self-check suite found a failure
    1  anything else
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import pipeline as pl
from .ablate import (AblateConfig, build_crop_samples, fit_stage_models,
                     load_split_images, run_ablation, write_ablation_csv,
                     _scene_samples, _train_model)
from .data import (ManifestFormatError, ProposalPolicy, SceneSpec,
                   SceneSpecError, generate_dataset, generate_proposals,
                   load_manifest)
from .ensemble import (EnsembleFormatError, ModelPool, PoolMember,
                       SelectionProblem, greedy_select_all_class,
                       greedy_select_per_class, pool_metrics,
                       save_ensemble_spec)
from .evaluation import mean_ap, write_eval_report
from .network import (ModelFormatError, ModelVersionError, NetworkConfig,
                      load_model, save_model)
from .pipeline import (AuxBundle, AuxBundleError, RecordFormatError,
                       load_aux_bundle, load_detections, load_proposals,
                       save_aux_bundle, save_detections, save_proposals)
from .tensorio import TensorRecordError
from .trainer import LabeledDataset, SgdConfig, TrainingSchedule, run_schedule
from .util import rng_for

log = logging.getLogger(__name__)


class CheckFailedError(RuntimeError):
    """A grad-check or oracle-check case did not pass."""


_SCHEMA_ERRORS = (
    ManifestFormatError,
    SceneSpecError,
    RecordFormatError,
    AuxBundleError,
    EnsembleFormatError,
    ModelFormatError,
    ModelVersionError,
    TensorRecordError,
)


# ---------------------------------------------------------------------------
# gen-data


def _load_scene_spec(path):
    if path is None:
        return SceneSpec()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneSpecError(f"{path}: not valid JSON ({exc})")
    return SceneSpec.from_json_dict(doc)


def cmd_gen_data(args):
    spec = _load_scene_spec(args.spec)
    if args.image_format:
        spec = replace(spec, image_format=args.image_format)
    counts = {}
    for name, count in (("train", args.train), ("val", args.val),
                        ("test", args.test)):
        if count > 0:
            counts[name] = count
    if not counts:
        raise ValueError("nothing to generate: all split counts are zero")
    manifests = generate_dataset(spec, counts, seed=args.seed, out_dir=args.out)
    for split in sorted(manifests):
        man = manifests[split]
        print("%s: %d images -> %s" % (split, len(man.records),
                                       os.path.join(args.out, split + ".jsonl")))
    return 0


# ---------------------------------------------------------------------------
# train


def _train_datasets(schedule, manifest, images, input_hw, seed):
    """The LabeledDatasets a schedule's phases ask for, built lazily."""
    needed = {phase.dataset_key for phase in schedule.phases}
    datasets = {}
    if "target_crops" in needed:
        samples = build_crop_samples(manifest, images, input_hw,
                                     rng_for(seed, "cli.crops.fine"))
        datasets["target_crops"] = LabeledDataset(samples, 4, "objects-fine")
    if "source_crops" in needed:
        samples = build_crop_samples(manifest, images, input_hw,
                                     rng_for(seed, "cli.crops.coarse"),
                                     label="coarse")
        datasets["source_crops"] = LabeledDataset(samples, 2, "objects-coarse")
    if "whole_images" in needed:
        scene_types = sorted({rec.scene_type for rec in manifest.records})
        samples = _scene_samples(manifest, images, input_hw, scene_types,
                                 len(manifest.records))
        datasets["whole_images"] = LabeledDataset(samples, len(scene_types),
                                                  "scenes")
    return datasets


def cmd_train(args):
    manifest = load_manifest(os.path.join(args.data, "train.jsonl"))
    images = load_split_images(manifest, args.data)
    schedule = TrainingSchedule.named(args.schedule, t_stages=args.stages)

    net_config = NetworkConfig()
    if args.no_def_branch:
        net_config = replace(net_config,
                             def_branch=replace(net_config.def_branch,
                                                enabled=False))
    input_hw = net_config.input_shape[1:]
    datasets = _train_datasets(schedule, manifest, images, input_hw, args.seed)
    cfg = SgdConfig(learning_rate=args.lr, epochs=args.epochs,
                    batch_size=args.batch_size, seed=args.seed)
    net, report = run_schedule(schedule, datasets, cfg, net_config, args.seed)
    save_model(net, args.out)
    for phase in report.phases:
        first, last = phase.boundary()
        if first is None:
            print("phase %-28s (no steps)" % phase.label)
        else:
            print("phase %-28s loss %.4f -> %.4f (%d steps)"
                  % (phase.label, first, last, len(phase.losses)))
    print("model -> %s" % args.out)

    if args.aux_out:
        base = AblateConfig()
        crop_rng = rng_for(args.seed, "cli.aux.crops")
        samples = build_crop_samples(manifest, images, input_hw, crop_rng)
        first_net = _train_model(base.first_pass_config, samples, args.seed,
                                 args.epochs, args.lr, "cli-first-pass")
        scene_types = sorted({rec.scene_type for rec in manifest.records})
        ctx_config = replace(base.context_config, num_classes=len(scene_types))
        scenes = _scene_samples(manifest, images,
                                ctx_config.input_shape[1:], scene_types,
                                len(manifest.records))
        ctx_net = _train_model(ctx_config, scenes, args.seed, args.epochs,
                               args.lr, "cli-context")
        aux_records = manifest.records[-args.aux_images:]
        aux_man = replace(manifest, records=list(aux_records))
        subbox, fusion, regressor, threshold = fit_stage_models(
            net, first_net, ctx_net, aux_man, images, ProposalPolicy(),
            args.seed)
        bundle = AuxBundle(rejection_threshold=threshold, first_pass=first_net,
                           subbox=subbox, context_net=ctx_net,
                           context_fusion=fusion, regressor=regressor)
        save_aux_bundle(bundle, args.aux_out)
        print("aux bundle (T=%.4f) -> %s" % (threshold, args.aux_out))
    return 0


# ---------------------------------------------------------------------------
# detect


def cmd_detect(args):
    net = load_model(args.model)
    manifest = load_manifest(os.path.join(args.data, args.split + ".jsonl"))
    images = load_split_images(manifest, args.data)

    if args.proposals:
        loaded = load_proposals(args.proposals)
        proposals = {iid: [box for box, _scores in rows]
                     for iid, rows in loaded.items()}
    else:
        raw = generate_proposals(manifest, ProposalPolicy(), seed=args.seed)
        proposals = {iid: [pl.BoundingBox.from_seq(b) for b in boxes]
                     for iid, boxes in raw.items()}

    if args.aux:
        options = load_aux_bundle(args.aux).to_options()
    else:
        options = pl.DetectOptions()
    if args.threshold is not None:
        options.rejection_threshold = args.threshold
    if args.no_rejection:
        options.rejection = False
    if args.no_subbox:
        options.subbox = None
    if args.no_context:
        options.context_fusion = None
    if args.no_refine:
        options.refine = None
    if args.no_nms:
        options.nms = False

    detections = []
    total_in = total_scored = 0
    for rec in manifest.records:
        boxes = proposals.get(rec.id, [])
        result = pl.detect(images[rec.id], rec.id, net, boxes, options)
        detections.extend(result.detections)
        total_in += result.proposals_in
        total_scored += result.proposals_scored
    save_detections(args.out, detections)
    if args.save_proposals:
        save_proposals(args.save_proposals, proposals)
    print("%d images, %d proposals in, %d scored, %d detections -> %s"
          % (len(manifest.records), total_in, total_scored, len(detections),
             args.out))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    detections = load_detections(args.detections)
    manifest = load_manifest(os.path.join(args.data, args.split + ".jsonl"),
                             check_images=False)
    value, per_class = mean_ap(detections, manifest.ground_truth(),
                               iou_threshold=args.iou)
    for cls in sorted(per_class):
        print("AP[%d] %.4f" % (cls, per_class[cls]))
    print("mAP %.4f" % value)
    if args.out:
        write_eval_report(args.out, per_class, value)
        print("report -> %s" % args.out)
    return 0


# ---------------------------------------------------------------------------
# ensemble


def _load_scored(path):
    """Scored-proposal file -> (entries, score matrix)."""
    loaded = load_proposals(path)
    entries, rows = [], []
    for iid in sorted(loaded):
        for box, scores in loaded[iid]:
            if scores is None:
                raise EnsembleFormatError(
                    f"{path}: proposal for {iid!r} has no scores")
            entries.append((iid, box))
            rows.append(scores)
    return entries, np.stack(rows)


def cmd_ensemble(args):
    manifest = load_manifest(os.path.join(args.data, args.split + ".jsonl"),
                             check_images=False)
    members, entries = [], None
    for path in args.scored:
        file_entries, scores = _load_scored(path)
        if entries is None:
            entries = file_entries
        elif file_entries != entries:
            raise EnsembleFormatError(
                f"{path}: proposal entries disagree with {args.scored[0]}")
        model_id = os.path.splitext(os.path.basename(path))[0]
        members.append(PoolMember(model_id, scores))
    problem = SelectionProblem(entries, manifest.ground_truth(),
                               num_classes=members[0].scores.shape[1])
    pool = ModelPool(problem, members)
    if args.mode == "per-cls":
        spec = greedy_select_per_class(pool)
    else:
        spec, trace = greedy_select_all_class(pool)
        for model_id, metric in trace:
            print("+ %-20s %.4f" % (model_id, metric))
    value, per_class = pool_metrics(pool, spec.selection_map)
    for cls in sorted(per_class):
        print("AP[%d] %.4f  models %s" % (cls, per_class[cls],
                                          ",".join(spec.selection_map[cls])))
    print("ensemble %s mAP %.4f" % (args.mode, value))
    save_ensemble_spec(spec, args.out)
    print("spec -> %s" % args.out)
    return 0


# ---------------------------------------------------------------------------
# self checks


def cmd_grad_check(args):
    from .gradcheck import run_suite

    results = run_suite(range(args.seeds), rel_tol=args.rel_tol,
                        abs_tol=args.abs_tol, epsilon=args.epsilon)
    failures = [(seed, name, rep) for seed, name, rep in results
                if not rep.passed]
    by_name = {}
    for _seed, name, rep in results:
        worst = by_name.get(name)
        if worst is None or rep.max_rel_err > worst:
            by_name[name] = rep.max_rel_err
    for name in sorted(by_name):
        print("%-16s max_rel %.3e" % (name, by_name[name]))
    print("%d cases over %d seeds, %d failures"
          % (len(results), args.seeds, len(failures)))
    if failures:
        for seed, name, rep in failures[:10]:
            print("FAIL seed %d %s: %s" % (seed, name, rep))
        raise CheckFailedError(f"{len(failures)} gradient checks failed")
    return 0


def cmd_oracle_check(args):
    from .defpool import (DefPoolParams, defpool_forward, dpm_score_oracle,
                          dpm_to_defpool, DpmParams)
    from .layers import MaxPoolLayer
    from .evaluation import average_precision, average_precision_bruteforce
    from .gradcheck import tie_free

    rng = np.random.default_rng(args.seed)

    # maxpool degeneracy: zero coefficients must reproduce plain pooling
    for _ in range(args.cases):
        v = int(rng.integers(4, 12))
        h = int(rng.integers(4, 12))
        radius = int(rng.integers(1, (min(v, h) - 1) // 2 + 1))
        sy = int(rng.integers(1, 4))
        sx = int(rng.integers(1, 4))
        m = rng.standard_normal((v, h))
        side = 2 * radius + 1
        params = DefPoolParams(radius, sy, sx, np.zeros(1),
                               np.abs(rng.standard_normal((1, side, side))))
        out, _ = defpool_forward(m, params)
        pooled, _ = MaxPoolLayer((side, side), (sy, sx)).forward(m[None])
        if out.shape != pooled[0].shape or not np.array_equal(out, pooled[0]):
            raise CheckFailedError("defpool with zero coefficients != maxpool")
    print("defpool degeneracy: ok (%d geometries bitwise equal)" % args.cases)

    # quadratic-part equivalence within 1e-9
    worst = 0.0
    for _ in range(50):
        v = int(rng.integers(5, 10))
        h = int(rng.integers(5, 10))
        m = tie_free(rng, (v, h))
        q = DpmParams(
            anchor_i=int(rng.integers(0, v)),
            anchor_j=int(rng.integers(0, h)),
            quad_i=float(np.abs(rng.standard_normal()) + 0.2),
            quad_j=float(np.abs(rng.standard_normal()) + 0.2),
            lin_i=float(rng.standard_normal()),
            lin_j=float(rng.standard_normal()),
        )
        params, constant = dpm_to_defpool(q, v, h)
        out, _ = defpool_forward(m, params)
        got = float(out.reshape(-1)[0]) - constant
        want = dpm_score_oracle(m, q)
        err = abs(got - want)
        worst = max(worst, err)
        if err > 1e-9:
            raise CheckFailedError(
                f"dpm equivalence off by {err:.3e} (limit 1e-9)")
    print("dpm equivalence: ok (max abs err %.2e over 50 maps)" % worst)

    # ranked-retrieval metric against the exhaustive restatement
    worst = 0.0
    for case in range(args.cases):
        n_det = int(rng.integers(1, 8))
        n_gt = int(rng.integers(0, 5))
        dets = []
        for i in range(n_det):
            x1, y1 = rng.uniform(0, 20, 2)
            w, h = rng.uniform(2, 8, 2)
            dets.append(pl.Detection("img", pl.BoundingBox(x1, y1, x1 + w, y1 + h),
                                     0, float(rng.choice([0.3, 0.5, 0.9]))))
        gt_boxes = []
        for _ in range(n_gt):
            x1, y1 = rng.uniform(0, 20, 2)
            w, h = rng.uniform(2, 8, 2)
            gt_boxes.append((pl.BoundingBox(x1, y1, x1 + w, y1 + h), 0))
        gt = {"img": gt_boxes}
        fast = average_precision(dets, gt, 0, 0.5).ap
        slow = average_precision_bruteforce(dets, gt, 0, 0.5)
        err = abs(fast - slow)
        worst = max(worst, err)
        if err > 1e-12:
            raise CheckFailedError(
                f"AP mismatch {err:.3e} vs brute force (case {case})")
    print("ap oracle: ok (max abs err %.2e over %d cases)" % (worst, args.cases))
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args):
    cfg = AblateConfig()
    cfg = replace(cfg, train_images=args.train_images,
                  val_images=args.val_images, epochs=args.epochs)
    reports = []
    for seed in args.seeds:
        report = run_ablation(seed, os.path.join(args.out, f"seed-{seed}"),
                              cfg, verbose=args.verbose)
        reports.append(report)
        for name, value in report.rows:
            print("seed %d  %-28s mAP %.4f" % (seed, name, value))
        frac = (1.0 - report.proposals_kept / report.proposals_total
                if report.proposals_total else 0.0)
        print("seed %d  rejection %.1f%%  recall %.4f -> %.4f  (%.1fs)"
              % (seed, 100.0 * frac, report.recall_full, report.recall_kept,
                 report.elapsed_s))
    csv_path = os.path.join(args.out, "ablate.csv")
    write_ablation_csv(csv_path, reports)

    names = [name for name, _ in reports[0].rows]
    print("mean over %d seeds:" % len(reports))
    for name in names:
        mean = float(np.mean([rep.row_map()[name] for rep in reports]))
        print("  %-28s mAP %.4f" % (name, mean))
    print("csv -> %s" % csv_path)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="defnet",
        description="deformation-pooling detection workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic detection dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--spec", help="scene spec JSON file")
    p.add_argument("--image-format", choices=("ppm", "png"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector on generated data")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--schedule", default="plain",
                   choices=("plain", "multistage", "scheme1", "scheme2"))
    p.add_argument("--stages", type=int, default=2,
                   help="stage count for --schedule multistage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--no-def-branch", action="store_true",
                   help="plain-pooling trunk only")
    p.add_argument("--aux-out", help="also fit stage models, write bundle here")
    p.add_argument("--aux-images", type=int, default=250,
                   help="trailing train images used for stage-model fitting")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run the staged detector over a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="detections JSONL to write")
    p.add_argument("--aux", help="stage-model bundle from train --aux-out")
    p.add_argument("--proposals", help="proposal JSONL (default: generate)")
    p.add_argument("--save-proposals", help="write generated proposals here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=None,
                   help="override rejection threshold")
    p.add_argument("--no-rejection", action="store_true")
    p.add_argument("--no-subbox", action="store_true")
    p.add_argument("--no-context", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-nms", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="select a model ensemble greedily")
    p.add_argument("--scored", nargs="+", required=True,
                   help="scored-proposal JSONL files, one per model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--mode", default="all-cls", choices=("all-cls", "per-cls"))
    p.add_argument("--out", required=True, help="ensemble spec JSON to write")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--abs-tol", type=float, default=1e-7)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("oracle-check",
                       help="pooling, scoring and metric oracle checks")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("ablate", help="directional ablation over seeds")
    p.add_argument("--out", required=True, help="working directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--train-images", type=int, default=2000)
    p.add_argument("--val-images", type=int, default=500)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _SCHEMA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except CheckFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
