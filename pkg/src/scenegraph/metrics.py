"""Scene-graph evaluation: R@K, nGR@K, mR@K, zsR@K, phrase/relation detection and wmAP."""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scene import BoundingBox, SceneAnnotation, iou

PROTOCOLS = ("predcls", "sgcls", "sgdet", "phrdet", "reldet")
_INDEX_MATCHED = ("predcls", "sgcls")


@dataclass(frozen=True)
class RankedTriplet:
    subject_box: BoundingBox
    object_box: BoundingBox
    subject_class: int
    object_class: int
    predicate: int
    score: float
    subject_index: int | None = None
    object_index: int | None = None

    def __post_init__(self):
        if self.predicate < 1:
            raise ValueError("ranked triplets carry foreground predicates only")
        if not np.isfinite(self.score):
            raise ValueError("triplet score must be finite")


@dataclass(frozen=True)
class GtTriplet:
    subject_index: int
    object_index: int
    subject_box: BoundingBox
    object_box: BoundingBox
    subject_class: int
    object_class: int
    predicate: int

    @property
    def label_triple(self) -> tuple[int, int, int]:
        return (self.subject_class, self.predicate, self.object_class)


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "predcls"
    k: int | None = 50
    graph_constraint: bool = True
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.k is not None and self.k < 1:
            raise ValueError("K must be positive")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")


@dataclass
class ScenePredictions:
    """Pair-level model output for one scene.

    For predcls/sgcls the predicted objects are the gt objects, in gt order.
    """

    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    pairs: np.ndarray
    rel_dists: np.ndarray


@dataclass
class EvalScene:
    name: str
    gt: list[GtTriplet]
    predictions: ScenePredictions | None = None
    triplets: list[RankedTriplet] | None = None

    @classmethod
    def from_annotation(cls, name: str, ann: SceneAnnotation, **kw) -> EvalScene:
        return cls(name, gt_triplets(ann), **kw)


def gt_triplets(ann: SceneAnnotation) -> list[GtTriplet]:
    return [GtTriplet(s, o, ann.gt_boxes[s], ann.gt_boxes[o], ann.gt_labels[s], ann.gt_labels[o], p)
            for s, p, o in ann.gt_triplets]


# ---------------------------------------------------------------------------
# ranking and matching


def rank_triplets(scene: EvalScene, config: EvalConfig) -> list[RankedTriplet]:
    """Score-ranked candidate triplets, truncated to the top K.

    Score = subject confidence x object confidence x predicate probability.
    With the graph constraint each ordered pair contributes its best
    foreground predicate; without it every foreground predicate competes.
    """
    if scene.triplets is not None:
        order = sorted(range(len(scene.triplets)), key=lambda i: (-scene.triplets[i].score, i))
        ranked = [scene.triplets[i] for i in order]
        return ranked[:config.k] if config.k is not None else ranked
    pred = scene.predictions
    if pred is None or len(pred.pairs) == 0:
        return []
    cands = []
    for p, (s, o) in enumerate(np.asarray(pred.pairs, dtype=int)):
        dist = pred.rel_dists[p]
        obj_score = float(pred.scores[s]) * float(pred.scores[o])
        if config.graph_constraint:
            r = 1 + int(np.argmax(dist[1:]))
            cands.append((-obj_score * float(dist[r]), s, o, r))
        else:
            cands.extend((-obj_score * float(dist[r]), s, o, r) for r in range(1, len(dist)))
    cands.sort()
    if config.k is not None:
        cands = cands[:config.k]
    boxes = [BoundingBox.from_array(b) for b in pred.boxes]
    return [RankedTriplet(boxes[s], boxes[o], int(pred.labels[s]), int(pred.labels[o]), r, -neg, s, o)
            for neg, s, o, r in cands]


def match_triplet(pred: RankedTriplet, gt: GtTriplet, protocol: str, iou_threshold: float = 0.5) -> bool:
    if (pred.subject_class, pred.predicate, pred.object_class) != gt.label_triple:
        return False
    if protocol in _INDEX_MATCHED and pred.subject_index is not None:
        return pred.subject_index == gt.subject_index and pred.object_index == gt.object_index
    if protocol == "phrdet":
        return iou(pred.subject_box.union(pred.object_box), gt.subject_box.union(gt.object_box)) >= iou_threshold
    return iou(pred.subject_box, gt.subject_box) >= iou_threshold and iou(pred.object_box, gt.object_box) >= iou_threshold


def max_matching(ranked: Sequence[RankedTriplet], gts: Sequence[GtTriplet], protocol: str,
                 iou_threshold: float = 0.5) -> int:
    """Size of the largest one-to-one prediction/gt matching.

    Predictions are inserted in rank order; a later prediction may re-route an
    earlier one along an augmenting path, so no gt is ever credited twice and
    a prediction overlapping several gts cannot block the others.
    """
    if not gts or not ranked:
        return 0
    adj = [[g for g, gt in enumerate(gts) if match_triplet(p, gt, protocol, iou_threshold)] for p in ranked]
    owner = [-1] * len(gts)

    def augment(p: int, seen: set[int]) -> bool:
        for g in adj[p]:
            if g in seen:
                continue
            seen.add(g)
            if owner[g] < 0 or augment(owner[g], seen):
                owner[g] = p
                return True
        return False

    return sum(augment(p, set()) for p in range(len(ranked)) if adj[p])


# ---------------------------------------------------------------------------
# recall family


def _scene_recalls(scenes: Iterable[EvalScene], config: EvalConfig, keep) -> list[float]:
    out = []
    for scene in scenes:
        gts = [g for g in scene.gt if keep(g)]
        if not gts:
            continue
        ranked = rank_triplets(scene, config)
        out.append(max_matching(ranked, gts, config.protocol, config.iou_threshold) / len(gts))
    return out


def recall_at_k(scenes: Iterable[EvalScene], config: EvalConfig) -> float:
    """Mean over scenes of matched-gt fraction in the top K, as a percentage."""
    per_scene = _scene_recalls(scenes, config, lambda g: True)
    if not per_scene:
        raise ValueError("no scene has ground-truth triplets to evaluate")
    return _percent_mean(per_scene)


def _percent_mean(values: Sequence[float]) -> float:
    # exactly rounded sum: the result does not depend on scene order
    return 100.0 * math.fsum(values) / len(values)


def per_predicate_recall(scenes: Sequence[EvalScene], config: EvalConfig) -> dict[int, float]:
    scenes = list(scenes)
    predicates = sorted({g.predicate for s in scenes for g in s.gt})
    return {r: _percent_mean(_scene_recalls(scenes, config, lambda g, r=r: g.predicate == r))
            for r in predicates}


def mean_recall_at_k(scenes: Iterable[EvalScene], config: EvalConfig) -> float:
    """Recall per predicate category, averaged over categories present in the gt."""
    per_class = per_predicate_recall(list(scenes), config)
    return math.fsum(per_class.values()) / len(per_class) if per_class else 0.0


def zero_shot_recall_at_k(scenes: Iterable[EvalScene], config: EvalConfig,
                          zero_shot: set[tuple[int, int, int]]) -> float | None:
    """Recall restricted to gt label triples in ``zero_shot``; None when none occur."""
    per_scene = _scene_recalls(scenes, config, lambda g: g.label_triple in zero_shot)
    if not per_scene:
        return None
    return _percent_mean(per_scene)


# ---------------------------------------------------------------------------
# weighted mAP


def _det_overlap(pred: RankedTriplet, gt: GtTriplet, mode: str) -> float:
    if mode == "phr":
        return iou(pred.subject_box.union(pred.object_box), gt.subject_box.union(gt.object_box))
    return min(iou(pred.subject_box, gt.subject_box), iou(pred.object_box, gt.object_box))


def average_precision(hits: Sequence[bool], n_gt: int) -> float:
    """Area under the precision/recall step curve over every score threshold."""
    if n_gt == 0:
        return 0.0
    tp, ap = 0, 0.0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            tp += 1
            ap += tp / rank
    return ap / n_gt


def per_predicate_ap(scenes: Sequence[EvalScene], mode: str, config: EvalConfig | None = None,
                     iou_threshold: float = 0.5) -> dict[int, tuple[float, int]]:
    """{predicate: (AP, number of gt triplets)} for every predicate in the gt."""
    if mode not in ("rel", "phr"):
        raise ValueError("mode must be 'rel' or 'phr'")
    config = config or EvalConfig(protocol="reldet", k=None)
    dets = []
    for si, scene in enumerate(scenes):
        for ri, t in enumerate(rank_triplets(scene, config)):
            dets.append((-t.score, si, ri, t))
    dets.sort(key=lambda d: d[:3])
    n_gt: dict[int, int] = {}
    for scene in scenes:
        for g in scene.gt:
            n_gt[g.predicate] = n_gt.get(g.predicate, 0) + 1
    used = [set() for _ in scenes]
    hits: dict[int, list[bool]] = {r: [] for r in n_gt}
    for _, si, _, t in dets:
        if t.predicate not in hits:
            continue
        best, best_g = iou_threshold, None
        for g, gt in enumerate(scenes[si].gt):
            if g in used[si] or (t.subject_class, t.predicate, t.object_class) != gt.label_triple:
                continue
            ov = _det_overlap(t, gt, mode)
            if ov >= best and (best_g is None or ov > best):
                best, best_g = ov, g
        if best_g is not None:
            used[si].add(best_g)
        hits[t.predicate].append(best_g is not None)
    return {r: (average_precision(hits[r], n_gt[r]), n_gt[r]) for r in sorted(n_gt)}


def wmap(scenes: Sequence[EvalScene], mode: str, config: EvalConfig | None = None,
         iou_threshold: float = 0.5) -> float:
    """Per-predicate AP weighted by each predicate's share of the gt, as a percentage."""
    per = per_predicate_ap(list(scenes), mode, config, iou_threshold)
    total = sum(n for _, n in per.values())
    if total == 0:
        return 0.0
    return 100.0 * sum(ap * n / total for ap, n in per.values())


def weighted_score(r50: float, wmap_rel: float, wmap_phr: float) -> float:
    return 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr


@dataclass
class MetricRow:
    metric: str
    protocol: str
    k: int | str
    value: float | None


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, metric, protocol, k, value) -> None:
        self.rows.append(MetricRow(metric, protocol, k, value))

    def to_csv(self) -> str:
        lines = ["metric,protocol,K,value"]
        for r in self.rows:
            v = "n/a" if r.value is None else f"{r.value:.6f}"
            lines.append(f"{r.metric},{r.protocol},{r.k},{v}")
        return "\n".join(lines) + "\n"
