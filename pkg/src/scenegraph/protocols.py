"""Turn scenes into model inputs per protocol and model outputs into rankable predictions."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import EvalScene, RankedTriplet, ScenePredictions, gt_triplets
from .model import SceneGraphModel, SceneInput
from .scene import (NUM_PREDICATES, UNION_DIM, VISUAL_DIM, BoundingBox, Scene, SceneFormatError, iou_matrix,
                    per_class_nms, spatial_feature, synthesize_union_feature)

MODEL_PROTOCOLS = ("predcls", "sgcls", "sgdet")


class ProtocolError(ValueError):
    """The scene lacks what the requested protocol needs."""


def align_gt_to_proposals(scene: Scene, min_iou: float = 0.5) -> np.ndarray:
    """Index of the best-overlapping proposal for every gt object (ties: lower index)."""
    gt = scene.annotation.box_array()
    if len(gt) == 0:
        return np.zeros(0, dtype=np.intp)
    if not scene.proposals:
        raise ProtocolError(f"scene {scene.name}: gt objects but no proposal features")
    ov = iou_matrix(gt, scene.proposal_boxes())
    best = np.argmax(ov, axis=1)
    if np.any(ov[np.arange(len(gt)), best] < min_iou):
        raise ProtocolError(f"scene {scene.name}: a gt box has no proposal with IoU >= {min_iou}")
    return best


def all_ordered_pairs(n: int) -> np.ndarray:
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def _union_rows(scene: Scene, prop_index: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    rows = []
    for s, o in pairs:
        a, b = int(prop_index[s]), int(prop_index[o])
        rows.append(scene.union_feature(a, b) if a != b
                    else synthesize_union_feature(scene.proposals[a], scene.proposals[b]))
    return np.array(rows).reshape(-1, UNION_DIM)


def gt_scene_input(scene: Scene, pairs: np.ndarray | None = None, labels_given: bool = True) -> SceneInput:
    """Inputs over the gt objects: features of the aligned proposals, gt boxes for geometry."""
    ann = scene.annotation
    match = align_gt_to_proposals(scene)
    x_hat = np.array([np.concatenate([scene.proposals[m].roi_feature, scene.proposals[m].class_scores,
                                      spatial_feature(box)])
                      for m, box in zip(match, ann.gt_boxes)]).reshape(len(match), VISUAL_DIM)
    conf = np.array([scene.proposals[m].detector_confidence for m in match])
    pairs = all_ordered_pairs(len(match)) if pairs is None else np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    labels = np.array(ann.gt_labels, dtype=np.intp) if labels_given else None
    return SceneInput(x_hat, conf, pairs, _union_rows(scene, match, pairs), labels)


def sgdet_scene_input(scene: Scene, nms: bool = True, nms_iou: float = 0.5,
                      max_proposals: int = 64) -> tuple[SceneInput, np.ndarray]:
    kept = per_class_nms(scene.proposals, nms_iou) if nms else \
        sorted(range(len(scene.proposals)), key=lambda i: (-scene.proposals[i].detector_confidence, i))
    kept = np.array(kept[:max_proposals], dtype=np.intp)
    x_hat = np.array([np.concatenate([scene.proposals[k].roi_feature, scene.proposals[k].class_scores,
                                      spatial_feature(scene.proposals[k].box)]) for k in kept])
    conf = np.array([scene.proposals[k].detector_confidence for k in kept])
    pairs = all_ordered_pairs(len(kept))
    return SceneInput(x_hat.reshape(len(kept), VISUAL_DIM), conf, pairs, _union_rows(scene, kept, pairs)), kept


def run_protocol(scenes: Sequence[Scene], model: SceneGraphModel, protocol: str, batch_size: int = 8,
                 nms: bool = True, nms_iou: float = 0.5) -> list[EvalScene]:
    """Predict every scene under ``protocol`` and pair the result with its gt.

    predcls: gt boxes and labels given.  sgcls: gt boxes given, labels from
    the object classifier.  sgdet: proposals after per-class NMS.
    """
    if protocol not in MODEL_PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    prepared = []
    for scene in scenes:
        if protocol == "sgdet":
            if scene.annotation.gt_triplets and not scene.proposals:
                raise ProtocolError(f"scene {scene.name}: sgdet needs proposals")
            inp, kept = sgdet_scene_input(scene, nms, nms_iou)
            boxes = scene.proposal_boxes()[kept] if len(kept) else np.zeros((0, 4))
        else:
            inp = gt_scene_input(scene, labels_given=(protocol == "predcls"))
            boxes = scene.annotation.box_array()
        prepared.append((scene, inp, boxes))

    results = []
    live = [p for p in prepared if p[1].n_objects > 0]
    outputs = {}
    for start in range(0, len(live), batch_size):
        chunk = live[start:start + batch_size]
        out = model.forward([inp for _, inp, _ in chunk])
        cls, rel = out.class_dist(), out.rel_dist()
        for i, (scene, inp, _) in enumerate(chunk):
            rows = slice(out.object_offsets[i], out.object_offsets[i + 1])
            prs = slice(out.pair_offsets[i], out.pair_offsets[i + 1])
            outputs[id(scene)] = (cls[rows], rel[prs])

    for scene, inp, boxes in prepared:
        if inp.n_objects == 0:
            preds = ScenePredictions(np.zeros((0, 4)), np.zeros(0, int), np.zeros(0),
                                     np.zeros((0, 2), int), np.zeros((0, NUM_PREDICATES)))
        else:
            cls, rel = outputs[id(scene)]
            if protocol == "predcls":
                labels, scores = inp.labels, np.ones(inp.n_objects)
            else:
                labels = 1 + np.argmax(cls[:, 1:], axis=1)
                scores = cls[np.arange(len(labels)), labels]
            preds = ScenePredictions(boxes, labels, scores, inp.pairs, rel)
        results.append(EvalScene(scene.name, gt_triplets(scene.annotation), predictions=preds))
    return results


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(path, ranked: dict[str, list[RankedTriplet]]) -> None:
    """One tab-separated record per triplet:
    scene_id, subject box (4), subject class, object box (4), object class, predicate, score."""
    lines = []
    for scene_id, triplets in ranked.items():
        for t in triplets:
            fields = [scene_id, *map(repr, map(float, t.subject_box.as_tuple())), str(t.subject_class),
                      *map(repr, map(float, t.object_box.as_tuple())), str(t.object_class),
                      str(t.predicate), repr(float(t.score))]
            lines.append("\t".join(fields))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_predictions(path) -> dict[str, list[RankedTriplet]]:
    out: dict[str, list[RankedTriplet]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 13:
            raise SceneFormatError(f"{path}:{lineno}: expected 13 tab-separated fields, got {len(f)}")
        try:
            t = RankedTriplet(BoundingBox(*map(float, f[1:5])), BoundingBox(*map(float, f[6:10])),
                              int(f[5]), int(f[10]), int(f[11]), float(f[12]))
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
        out.setdefault(f[0], []).append(t)
    return out
