"""Seeded synthetic scenes with a Zipf-shaped predicate distribution.

Each new object is attached to an earlier one by a predicate; the predicate
fixes where the new box goes relative to its anchor (above, inside, ...),
and biases which class the subject is drawn from.  Predicates come from a
dedicated random stream so their sequence depends on the seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .scene import (NUM_OBJECT_CLASSES, NUM_PREDICATES, ROI_DIM, BoundingBox, ObjectProposal, PairFeature,
                    Scene, SceneAnnotation, save_scene_file, synthesize_union_feature, write_manifest)

RULES = ("above", "below", "left_of", "right_of", "inside", "contains", "overlaps", "far_from")
_OPPOSITE = {"above": "below", "below": "above", "left_of": "right_of", "right_of": "left_of"}


@dataclass(frozen=True)
class SyntheticSpec:
    n_scenes: int = 20
    min_objects: int = 3
    max_objects: int = 6
    n_object_classes: int = NUM_OBJECT_CLASSES
    n_predicates: int = NUM_PREDICATES
    active_object_classes: int = 10
    active_predicates: int = 8
    zipf_exponent: float = 1.0
    subject_class_bias: float = 0.8
    duplicate_proposals: int = 1
    bump_amplitude: float = 3.0
    bump_width: float = 8.0
    feature_noise: float = 0.1

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.active_object_classes < self.n_object_classes:
            raise ValueError("active_object_classes out of range")
        if not 1 <= self.active_predicates < self.n_predicates:
            raise ValueError("active_predicates out of range")
        if self.n_object_classes != NUM_OBJECT_CLASSES or self.n_predicates != NUM_PREDICATES:
            raise ValueError("scene files fix 151 object classes and 50 predicates")

    @classmethod
    def from_text(cls, text: str) -> SyntheticSpec:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: unknown or malformed entry {raw!r}")
            kw[key] = float(value) if types[key] == "float" else int(value)
        return cls(**kw)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -exponent
    return w / w.sum()


def predicate_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def _class_centres(spec: SyntheticSpec) -> np.ndarray:
    # golden-ratio spacing keeps the active classes' bumps apart
    c = np.arange(spec.n_object_classes)
    return (c * 0.6180339887498949 % 1.0) * ROI_DIM


def _size(rng, lo=0.1, hi=0.3):
    return rng.uniform(lo, hi), rng.uniform(lo, hi)


def _clip_box(x1, y1, x2, y2, min_size=0.02):
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(1.0, x2), min(1.0, y2)
    if x2 - x1 < min_size:
        x1 = min(x1, 1.0 - min_size)
        x2 = x1 + min_size
    if y2 - y1 < min_size:
        y1 = min(y1, 1.0 - min_size)
        y2 = y1 + min_size
    return x1, y1, x2, y2


def _room(anchor, rule, w, h, gap):
    ax1, ay1, ax2, ay2 = anchor
    return {"above": ay1 - gap >= h, "below": 1 - ay2 - gap >= h,
            "left_of": ax1 - gap >= w, "right_of": 1 - ax2 - gap >= w}.get(rule, True)


def _place(rng, anchor, rule):
    """Box for a new object standing in ``rule`` relation to ``anchor``."""
    ax1, ay1, ax2, ay2 = anchor
    aw, ah = ax2 - ax1, ay2 - ay1
    cx, cy = (ax1 + ax2) / 2, (ay1 + ay2) / 2
    w, h = _size(rng)
    gap = rng.uniform(0.0, 0.03)
    jx, jy = rng.uniform(-0.05, 0.05, size=2)
    if rule == "above":
        box = (cx - w / 2 + jx, ay1 - gap - h, cx + w / 2 + jx, ay1 - gap)
    elif rule == "below":
        box = (cx - w / 2 + jx, ay2 + gap, cx + w / 2 + jx, ay2 + gap + h)
    elif rule == "left_of":
        box = (ax1 - gap - w, cy - h / 2 + jy, ax1 - gap, cy + h / 2 + jy)
    elif rule == "right_of":
        box = (ax2 + gap, cy - h / 2 + jy, ax2 + gap + w, cy + h / 2 + jy)
    elif rule == "inside":
        fw, fh = rng.uniform(0.3, 0.6, size=2)
        x1 = ax1 + rng.uniform(0, 1 - fw) * aw
        y1 = ay1 + rng.uniform(0, 1 - fh) * ah
        box = (x1, y1, x1 + fw * aw, y1 + fh * ah)
    elif rule == "contains":
        m = rng.uniform(0.03, 0.12, size=4)
        box = (ax1 - m[0], ay1 - m[1], ax2 + m[2], ay2 + m[3])
    elif rule == "overlaps":
        box = (ax1 + 0.5 * aw, ay1 + 0.3 * ah, ax2 + 0.5 * aw, ay2 + 0.3 * ah)
    else:  # far_from
        best = None
        for _ in range(20):
            x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            d = np.hypot(x1 + w / 2 - cx, y1 + h / 2 - cy)
            if best is None or d > best[0]:
                best = (d, (x1, y1, x1 + w, y1 + h))
            if d > 0.45:
                break
        box = best[1]
    return _clip_box(*box)


def _jitter(rng, box, scale):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    d = rng.uniform(-scale, scale, size=4) * np.array([w, h, w, h])
    return _clip_box(x1 + d[0], y1 + d[1], x2 + d[2], y2 + d[3])


def _f32(v):
    # values are stored as 32-bit floats; generate them representable
    return np.asarray(v, dtype=np.float32).astype(np.float64)


class _Generator:
    def __init__(self, spec: SyntheticSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng([seed, 0])
        self.pred_rng = predicate_stream(seed)
        self.active_classes = np.arange(1, spec.active_object_classes + 1)
        self.weights = zipf_weights(spec.active_predicates, spec.zipf_exponent)
        self.centres = _class_centres(spec)
        self.positions = np.arange(ROI_DIM)

    def subject_class(self, predicate: int) -> int:
        n = len(self.active_classes)
        if self.rng.random() < self.spec.subject_class_bias:
            return int(self.active_classes[(2 * predicate + int(self.rng.integers(2))) % n])
        return int(self.rng.choice(self.active_classes))

    def roi(self, cls: int) -> np.ndarray:
        s = self.spec
        bump = s.bump_amplitude * np.exp(-0.5 * ((self.positions - self.centres[cls]) / s.bump_width) ** 2)
        return _f32(bump + self.rng.normal(0.0, s.feature_noise, ROI_DIM))

    def proposal(self, cls: int, box, confidence_range=(0.55, 0.95)) -> ObjectProposal:
        conf = float(_f32(self.rng.uniform(*confidence_range)))
        scores = np.zeros(NUM_OBJECT_CLASSES)
        others = self.rng.choice(self.active_classes[self.active_classes != cls], size=3, replace=False) \
            if len(self.active_classes) > 3 else []
        scores[cls] = conf
        if len(others):
            scores[others] = self.rng.dirichlet(np.ones(len(others))) * (1.0 - conf) * 0.9
        return ObjectProposal(BoundingBox(*_f32(box)), self.roi(cls), _f32(scores), cls, conf)

    def scene(self, name: str) -> Scene:
        s = self.spec
        n = int(self.rng.integers(s.min_objects, s.max_objects + 1))
        x, y = self.rng.uniform(0.3, 0.5, size=2)
        w, h = _size(self.rng)
        boxes = [_clip_box(x, y, x + w, y + h)]
        labels = [int(self.rng.choice(self.active_classes))]
        triplets = []
        for k in range(1, n):
            predicate = 1 + int(self.pred_rng.choice(s.active_predicates, p=self.weights))
            rule = RULES[(predicate - 1) % len(RULES)]
            anchor = int(self.rng.integers(k))
            w, h = _size(self.rng)
            if _room(boxes[anchor], rule, w, h, 0.03):
                boxes.append(_place(self.rng, boxes[anchor], rule))
                labels.append(self.subject_class(predicate))
                triplets.append((k, predicate, anchor))
            else:
                # no room on that side: new object goes opposite and becomes the object
                boxes.append(_place(self.rng, boxes[anchor], _OPPOSITE[rule]))
                labels.append(int(self.rng.choice(self.active_classes)))
                triplets.append((anchor, predicate, k))
        gt_boxes = [BoundingBox(*_f32(b)) for b in boxes]
        proposals = [self.proposal(c, _jitter(self.rng, b, 0.03)) for c, b in zip(labels, boxes)]
        for _ in range(s.duplicate_proposals):
            i = int(self.rng.integers(n))
            proposals.append(self.proposal(labels[i], _jitter(self.rng, boxes[i], 0.08), (0.2, 0.5)))
        pairs = [PairFeature(i, j, _f32(synthesize_union_feature(proposals[i], proposals[j])))
                 for i in range(len(proposals)) for j in range(len(proposals)) if i != j]
        return Scene(name, proposals, pairs, SceneAnnotation(gt_boxes, labels, triplets))


def generate_scenes(spec: SyntheticSpec, seed: int, prefix: str = "scene") -> list[Scene]:
    gen = _Generator(spec, seed)
    return [gen.scene(f"{prefix}_{i:05d}") for i in range(spec.n_scenes)]


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir, prefix: str = "scene") -> list[Path]:
    """Write scene files plus ``manifest.txt`` into ``out_dir``; return the scene paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for scene in generate_scenes(spec, seed, prefix):
        path = out / f"{scene.name}.bgtf"
        save_scene_file(path, scene)
        paths.append(path)
    write_manifest(out / "manifest.txt", paths, header=f"synthetic scenes, seed {seed}")
    return paths
