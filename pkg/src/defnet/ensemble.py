"""Model averaging and greedy ensemble selection.

A pool holds several models' score tensors over one shared proposal set
(the selection split).  Ensembles average member scores — either one
subset for every class ("all-cls") or an independently chosen subset
per class ("per-cls").  Selection is greedy forward search on the
selection-split metric, with an exhaustive-search oracle for small
pools; the per-class search falls back to the all-class subset for any
class it cannot beat, so per-class AP dominates the all-class ensemble
by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .evaluation import average_precision

__all__ = [
    "EnsembleFormatError", "PoolMember", "SelectionProblem", "ModelPool",
    "EnsembleSpec", "average_scores", "pool_metrics",
    "greedy_select_all_class", "greedy_select_per_class", "exhaustive_select",
    "save_ensemble_spec", "load_ensemble_spec", "ensemble_detections",
]


class EnsembleFormatError(ValueError):
    """An ensemble spec file violates the documented schema."""


@dataclass
class PoolMember:
    model_id: str
    scores: np.ndarray  # [n_proposals, num_classes]
    fingerprint: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("member scores must be [n_proposals, num_classes]")
        if not np.isfinite(self.scores).all():
            raise ValueError("member %r has non-finite scores" % self.model_id)


@dataclass
class SelectionProblem:
    """The shared proposal set and ground truth models are judged on."""

    entries: List[Tuple[str, object]]  # (image_id, box with x1..y2 attrs)
    ground_truth: Mapping[str, Sequence[Tuple[object, int]]]
    num_classes: int

    def classes_present(self) -> List[int]:
        return sorted({cls for rows in self.ground_truth.values() for _b, cls in rows})


@dataclass
class ModelPool:
    problem: SelectionProblem
    members: List[PoolMember] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.problem.entries)
        k = self.problem.num_classes
        ids = set()
        for m in self.members:
            if m.scores.shape != (n, k):
                raise ValueError(
                    "member %r scored %r proposals, pool has %d"
                    % (m.model_id, m.scores.shape, n))
            if m.model_id in ids:
                raise ValueError("duplicate model id %r" % m.model_id)
            ids.add(m.model_id)

    def member(self, model_id: str) -> PoolMember:
        for m in self.members:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def model_ids(self) -> List[str]:
        return sorted(m.model_id for m in self.members)


@dataclass
class EnsembleSpec:
    """Which models vote for which class, and how votes combine.

    ``selection_map`` maps every class id to the tuple of member model
    ids averaged for that class.  In ``all-cls`` mode every class maps
    to the same subset.
    """

    mode: str
    selection_map: Dict[int, Tuple[str, ...]]

    def __post_init__(self):
        if self.mode not in ("all-cls", "per-cls"):
            raise ValueError("mode must be 'all-cls' or 'per-cls', got %r" % self.mode)
        # Subsets are canonically sorted: membership is what matters, and a
        # fixed order keeps score averaging bit-deterministic across sources.
        self.selection_map = {int(k): tuple(sorted(v))
                              for k, v in self.selection_map.items()}
        for k, subset in self.selection_map.items():
            if not subset:
                raise ValueError("class %d has an empty model subset" % k)
        if self.mode == "all-cls":
            subsets = {tuple(sorted(v)) for v in self.selection_map.values()}
            if len(subsets) > 1:
                raise ValueError("all-cls spec must use one subset for every class")

    def models(self) -> List[str]:
        out = set()
        for subset in self.selection_map.values():
            out.update(subset)
        return sorted(out)


def average_scores(scores_by_model: Mapping[str, np.ndarray],
                   spec: EnsembleSpec) -> np.ndarray:
    """Arithmetic mean of member scores under the spec's selection map.

    ``scores_by_model`` maps model id to a ``[..., num_classes]`` score
    tensor; column ``k`` of the result averages the models chosen for
    class ``k``.  A single-model subset reproduces that model's column
    bit-for-bit.
    """
    if not spec.selection_map:
        raise ValueError("spec has no classes")
    any_scores = next(iter(scores_by_model.values()))
    out = np.zeros_like(np.asarray(any_scores, dtype=np.float64))
    for k, subset in spec.selection_map.items():
        cols = [np.asarray(scores_by_model[mid], dtype=np.float64)[..., k]
                for mid in subset]
        if len(cols) == 1:
            out[..., k] = cols[0]
        else:
            out[..., k] = np.mean(cols, axis=0)
    return out


# ---------------------------------------------------------------------------
# Metric plumbing


@dataclass
class _Det:
    image_id: str
    box: object
    class_id: int
    confidence: float


def _fused(pool: ModelPool, subset: Sequence[str], class_id: int) -> np.ndarray:
    cols = [pool.member(mid).scores[:, class_id] for mid in subset]
    if len(cols) == 1:
        return cols[0]
    return np.mean(cols, axis=0)


def _class_ap(pool: ModelPool, subset: Sequence[str], class_id: int) -> float:
    scores = _fused(pool, subset, class_id)
    dets = [
        _Det(image_id, box, class_id, float(scores[i]))
        for i, (image_id, box) in enumerate(pool.problem.entries)
    ]
    return average_precision(dets, pool.problem.ground_truth, class_id).ap


def pool_metrics(pool: ModelPool,
                 selection_map: Mapping[int, Sequence[str]]) -> Tuple[float, Dict[int, float]]:
    """(mAP, per-class AP) of a selection map on the selection split."""
    per_class = {}
    for k in pool.problem.classes_present():
        per_class[k] = _class_ap(pool, selection_map[k], k)
    if not per_class:
        raise ValueError("selection split has no ground truth")
    return float(sum(per_class.values()) / len(per_class)), per_class


def _subset_map(pool: ModelPool, subset: Sequence[str]) -> Dict[int, Tuple[str, ...]]:
    return {k: tuple(subset) for k in range(pool.problem.num_classes)}


def _subset_map_metric(pool: ModelPool, subset: Sequence[str]) -> float:
    m, _per = pool_metrics(pool, _subset_map(pool, subset))
    return m


# ---------------------------------------------------------------------------
# Selection


def greedy_select_all_class(pool: ModelPool):
    """Forward greedy search for one subset shared by all classes.

    Starting from the best single model, repeatedly add whichever model
    strictly improves selection-split mAP the most (ties broken toward
    the lower model id) and stop when no candidate improves.  Returns
    ``(spec, trace)`` where the trace lists ``(model_id, map_after)``
    rows in acceptance order; the mAP column is non-decreasing.
    """
    if not pool.members:
        raise ValueError("cannot select from an empty pool")
    chosen: List[str] = []
    best_map = float("-inf")
    trace: List[Tuple[str, float]] = []
    remaining = pool.model_ids()
    while remaining:
        scored = [(-_subset_map_metric(pool, chosen + [mid]), mid) for mid in remaining]
        neg_map, cand_id = min(scored)  # highest mAP, ties toward the lower id
        cand_map = -neg_map
        if cand_map <= best_map:
            break
        chosen.append(cand_id)
        remaining.remove(cand_id)
        best_map = cand_map
        trace.append((cand_id, cand_map))
    spec = EnsembleSpec(mode="all-cls", selection_map=_subset_map(pool, chosen))
    return spec, trace


def greedy_select_per_class(pool: ModelPool):
    """Per-class greedy selection that dominates the all-class ensemble.

    Each class runs its own forward greedy search on that class's AP;
    whenever the search cannot beat the all-class subset's AP for the
    class, the all-class subset is kept instead.  The returned spec
    therefore satisfies per-class AP >= all-class AP for every class.
    """
    all_spec, _trace = greedy_select_all_class(pool)
    all_subset = list(all_spec.selection_map[0])
    _m, all_per = pool_metrics(pool, all_spec.selection_map)

    selection: Dict[int, Tuple[str, ...]] = {}
    for k in range(pool.problem.num_classes):
        if k not in all_per:  # class absent from ground truth: keep all-cls subset
            selection[k] = tuple(all_subset)
            continue
        chosen: List[str] = []
        best_ap = float("-inf")
        remaining = pool.model_ids()
        while remaining:
            scored = [(-_class_ap(pool, chosen + [mid], k), mid) for mid in remaining]
            neg_ap, cand_id = min(scored)
            cand_ap = -neg_ap
            if cand_ap <= best_ap:
                break
            chosen.append(cand_id)
            remaining.remove(cand_id)
            best_ap = cand_ap
        if best_ap >= all_per[k]:
            selection[k] = tuple(chosen)
        else:
            selection[k] = tuple(all_subset)
    return EnsembleSpec(mode="per-cls", selection_map=selection)


def _all_subsets(ids: Sequence[str]):
    n = len(ids)
    for mask in range(1, 1 << n):
        yield [ids[i] for i in range(n) if mask >> i & 1]


def exhaustive_select(pool: ModelPool, per_class: bool = False,
                      max_models: int = 5) -> EnsembleSpec:
    """Try every non-empty subset; the oracle the greedy search is tested against.

    Ties are resolved toward smaller subsets, then lexicographically
    smaller id tuples, which makes the result unique.  Refuses pools
    larger than ``max_models``.
    """
    ids = pool.model_ids()
    if len(ids) > max_models:
        raise ValueError("exhaustive search limited to %d models, pool has %d"
                         % (max_models, len(ids)))
    if not ids:
        raise ValueError("cannot select from an empty pool")
    if not per_class:
        best = None
        for subset in _all_subsets(ids):
            m = _subset_map_metric(pool, subset)
            key = (-m, len(subset), tuple(subset))
            if best is None or key < best[0]:
                best = (key, subset)
        return EnsembleSpec(mode="all-cls", selection_map=_subset_map(pool, best[1]))

    selection: Dict[int, Tuple[str, ...]] = {}
    present = set(pool.problem.classes_present())
    for k in range(pool.problem.num_classes):
        if k not in present:
            selection[k] = tuple(ids)
            continue
        best = None
        for subset in _all_subsets(ids):
            ap = _class_ap(pool, subset, k)
            key = (-ap, len(subset), tuple(subset))
            if best is None or key < best[0]:
                best = (key, subset)
        selection[k] = tuple(best[1])
    return EnsembleSpec(mode="per-cls", selection_map=selection)


def ensemble_detections(pool: ModelPool, spec: EnsembleSpec) -> List[_Det]:
    """One detection per proposal from the fused scores (argmax class)."""
    scores_by_model = {m.model_id: m.scores for m in pool.members
                       if m.model_id in set(spec.models())}
    fused = average_scores(scores_by_model, spec)
    out = []
    for i, (image_id, box) in enumerate(pool.problem.entries):
        k = int(np.argmax(fused[i]))
        out.append(_Det(image_id, box, k, float(fused[i, k])))
    return out


# ---------------------------------------------------------------------------
# Spec file I/O


def save_ensemble_spec(spec: EnsembleSpec, path) -> None:
    doc = {
        "mode": spec.mode,
        "models": spec.models(),
        "selection_map": {str(k): list(v) for k, v in sorted(spec.selection_map.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_ensemble_spec(path) -> EnsembleSpec:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise EnsembleFormatError("ensemble spec is not valid JSON: %s" % exc)
    if not isinstance(doc, dict) or set(doc) != {"mode", "models", "selection_map"}:
        raise EnsembleFormatError("ensemble spec needs mode, models, selection_map")
    if not isinstance(doc["selection_map"], dict) or not doc["selection_map"]:
        raise EnsembleFormatError("selection_map must be a non-empty object")
    try:
        mapping = {int(k): tuple(v) for k, v in doc["selection_map"].items()}
        spec = EnsembleSpec(mode=doc["mode"], selection_map=mapping)
    except (TypeError, ValueError) as exc:
        raise EnsembleFormatError("bad ensemble spec: %s" % exc)
    declared = set(doc["models"])
    if set(spec.models()) != declared:
        raise EnsembleFormatError("models list disagrees with selection_map")
    return spec
