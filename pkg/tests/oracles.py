"""Independent reference implementations used by the tests.

Nothing here imports the matching or ranking code under test; the brute-force
matcher enumerates every assignment of gt triplets to distinct predictions.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from scenegraph.metrics import EvalScene, GtTriplet, ScenePredictions
from scenegraph.scene import BoundingBox


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def hull(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def oracle_candidates(pred: ScenePredictions, graph_constraint: bool, k: int):
    """(score, s, o, r) tuples, ranked by a plain full sort."""
    cands = []
    for p, (s, o) in enumerate(pred.pairs):
        dist = pred.rel_dists[p]
        if graph_constraint:
            best = 1
            for r in range(2, len(dist)):
                if dist[r] > dist[best]:
                    best = r
            rs = [best]
        else:
            rs = range(1, len(dist))
        for r in rs:
            cands.append((pred.scores[s] * pred.scores[o] * dist[r], int(s), int(o), r))
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    return cands[:k]


def oracle_match(cand, gt: GtTriplet, pred: ScenePredictions, protocol: str, thr=0.5) -> bool:
    _, s, o, r = cand
    if (int(pred.labels[s]), r, int(pred.labels[o])) != gt.label_triple:
        return False
    if protocol in ("predcls", "sgcls"):
        return (s, o) == (gt.subject_index, gt.object_index)
    ps, po = tuple(pred.boxes[s]), tuple(pred.boxes[o])
    gs, go = gt.subject_box.as_tuple(), gt.object_box.as_tuple()
    if protocol == "phrdet":
        return box_iou(hull(ps, po), hull(gs, go)) >= thr
    return box_iou(ps, gs) >= thr and box_iou(po, go) >= thr


def brute_force_matched(cands, gts, pred, protocol) -> int:
    """Largest number of gts that can be given distinct matching predictions (exhaustive)."""
    options = [[c for c, cand in enumerate(cands) if oracle_match(cand, g, pred, protocol)] + [None] for g in gts]
    best = 0
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) == len(set(used)):
            best = max(best, len(used))
    return best


def brute_force_recall(scenes, protocol, k, graph_constraint=True, keep=lambda g: True):
    per = []
    for sc in scenes:
        gts = [g for g in sc.gt if keep(g)]
        if not gts:
            continue
        cands = oracle_candidates(sc.predictions, graph_constraint, k)
        per.append(brute_force_matched(cands, gts, sc.predictions, protocol) / len(gts))
    return None if not per else 100.0 * math.fsum(per) / len(per)


def brute_force_mean_recall(scenes, protocol, k, graph_constraint=True):
    predicates = sorted({g.predicate for sc in scenes for g in sc.gt})
    vals = [brute_force_recall(scenes, protocol, k, graph_constraint, keep=lambda g, r=r: g.predicate == r)
            for r in predicates]
    return math.fsum(vals) / len(vals)


def random_eval_scene(rng: np.random.Generator, name="s", max_objects=5, max_triplets=6, n_labels=3,
                      n_predicates=4, protocol="reldet") -> EvalScene:
    """Small scene with deliberately overlapping boxes and repeated label triples.

    Predicted boxes are jittered copies of the gt boxes (for box-matched
    protocols), so one prediction can plausibly match several gts.
    """
    n = int(rng.integers(2, max_objects + 1))
    base = rng.uniform(0.0, 0.5, size=(n, 2))
    size = rng.uniform(0.2, 0.5, size=(n, 2))
    gt_boxes = np.hstack([base, base + size])
    gt_labels = rng.integers(1, n_labels + 1, size=n)
    pairs_all = [(i, j) for i in range(n) for j in range(n) if i != j]
    n_trip = int(rng.integers(1, min(max_triplets, len(pairs_all)) + 1))
    chosen = rng.choice(len(pairs_all), size=n_trip, replace=False)
    gts = []
    for c in chosen:
        s, o = pairs_all[c]
        r = int(rng.integers(1, n_predicates + 1))
        gts.append(GtTriplet(s, o, BoundingBox(*gt_boxes[s]), BoundingBox(*gt_boxes[o]),
                             int(gt_labels[s]), int(gt_labels[o]), r))
    if protocol in ("predcls", "sgcls"):
        boxes = gt_boxes.copy()
    else:
        boxes = gt_boxes + rng.normal(0, 0.04, size=gt_boxes.shape)
        boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 0.05)
    labels = gt_labels.copy() if protocol == "predcls" else np.where(rng.random(n) < 0.8, gt_labels,
                                                                      rng.integers(1, n_labels + 1, size=n))
    scores = np.ones(n) if protocol == "predcls" else rng.uniform(0.3, 1.0, size=n)
    pairs = np.array(pairs_all, dtype=int)
    logits = rng.normal(size=(len(pairs), 50))
    logits[:, n_predicates + 1:] -= 4.0  # keep mass on the few active predicates
    dists = np.exp(logits)
    dists /= dists.sum(axis=1, keepdims=True)
    return EvalScene(name, gts, predictions=ScenePredictions(boxes, labels, scores, pairs, dists))
