"""Scene-graph data model, proposal feature assembly, box geometry and scene files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import Tensor, matmul

ROI_DIM = 2048
NUM_OBJECT_CLASSES = 151
NUM_PREDICATES = 50
SPATIAL_DIM = 4
UNION_DIM = 2048
VISUAL_DIM = ROI_DIM + NUM_OBJECT_CLASSES + SPATIAL_DIM

MAGIC = b"BGTF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s9I")

# seed of the fixed (non-learned) projection used to synthesise union features
UNION_PROJECTION_SEED = 20_211_151


class SceneFormatError(ValueError):
    """A scene file or manifest does not conform to the on-disk format."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def union(self, other: BoundingBox) -> BoundingBox:
        return BoundingBox(min(self.x1, other.x1), min(self.y1, other.y1),
                           max(self.x2, other.x2), max(self.y2, other.y2))

    @classmethod
    def from_array(cls, a) -> BoundingBox:
        return cls(*(float(v) for v in a))


@dataclass(frozen=True, eq=False)
class ObjectProposal:
    box: BoundingBox
    roi_feature: np.ndarray
    class_scores: np.ndarray
    detector_label: int
    detector_confidence: float

    def __post_init__(self):
        if self.roi_feature.shape != (ROI_DIM,):
            raise ValueError(f"roi feature must have length {ROI_DIM}")
        if self.class_scores.shape != (NUM_OBJECT_CLASSES,):
            raise ValueError(f"class scores must have length {NUM_OBJECT_CLASSES}")
        if np.any(self.class_scores < 0) or np.any(self.class_scores > 1):
            raise ValueError("class scores must lie in [0, 1]")
        if not 0.0 <= self.detector_confidence <= 1.0:
            raise ValueError("detector confidence must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PairFeature:
    subject_index: int
    object_index: int
    union_feature: np.ndarray

    def __post_init__(self):
        if self.subject_index == self.object_index:
            raise ValueError("a pair needs two distinct proposals")
        if self.union_feature.shape != (UNION_DIM,):
            raise ValueError(f"union feature must have length {UNION_DIM}")


@dataclass(frozen=True)
class SceneAnnotation:
    gt_boxes: tuple[BoundingBox, ...] = ()
    gt_labels: tuple[int, ...] = ()
    gt_triplets: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))
        object.__setattr__(self, "gt_labels", tuple(int(v) for v in self.gt_labels))
        object.__setattr__(self, "gt_triplets", tuple(tuple(int(v) for v in t) for t in self.gt_triplets))
        n = len(self.gt_boxes)
        if len(self.gt_labels) != n:
            raise ValueError("gt_boxes and gt_labels differ in length")
        for lab in self.gt_labels:
            if not 0 <= lab < NUM_OBJECT_CLASSES:
                raise ValueError(f"object label {lab} out of range")
        for s, p, o in self.gt_triplets:
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError(f"triplet ({s}, {p}, {o}) indexes outside the gt objects")
            if not 1 <= p < NUM_PREDICATES:
                raise ValueError(f"triplet predicate {p} must be a foreground predicate")

    def box_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.gt_boxes], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True, eq=False)
class Scene:
    """One image worth of detector output plus its ground truth."""

    name: str
    proposals: tuple[ObjectProposal, ...] = ()
    pairs: tuple[PairFeature, ...] = ()
    annotation: SceneAnnotation = field(default_factory=SceneAnnotation)

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        n = len(self.proposals)
        for pf in self.pairs:
            if not (0 <= pf.subject_index < n and 0 <= pf.object_index < n):
                raise ValueError("pair feature indexes outside the proposals")

    def proposal_boxes(self) -> np.ndarray:
        return np.array([p.box.as_tuple() for p in self.proposals], dtype=np.float64).reshape(-1, 4)

    def union_feature(self, i: int, j: int) -> np.ndarray:
        """Stored union feature of proposals (i, j), synthesised when absent."""
        lookup = self._pair_lookup()
        if (i, j) in lookup:
            return lookup[(i, j)]
        return synthesize_union_feature(self.proposals[i], self.proposals[j])

    def _pair_lookup(self) -> dict[tuple[int, int], np.ndarray]:
        cached = self.__dict__.get("_lookup")
        if cached is None:
            cached = {(p.subject_index, p.object_index): p.union_feature for p in self.pairs}
            object.__setattr__(self, "_lookup", cached)
        return cached


@dataclass(frozen=True)
class ClassVocabulary:
    object_names: tuple[str, ...]
    predicate_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.object_names) != NUM_OBJECT_CLASSES or len(self.predicate_names) != NUM_PREDICATES:
            raise ValueError("vocabulary must list 151 object classes and 50 predicates")

    @classmethod
    def default(cls) -> ClassVocabulary:
        objects = ("__background__",) + tuple(f"object_{i}" for i in range(1, NUM_OBJECT_CLASSES))
        predicates = ("__no_relation__",) + tuple(f"predicate_{i}" for i in range(1, NUM_PREDICATES))
        return cls(objects, predicates)


# ---------------------------------------------------------------------------
# features


def spatial_feature(box: BoundingBox, image_size: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    w, h = image_size
    s = np.array([box.x1 / w, box.y1 / h, box.x2 / w, box.y2 / h])
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError(f"spatial feature {s} is not normalised to [0, 1]")
    return s


def assemble_parts(roi: np.ndarray, class_scores: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    """[roi(2048) | class scores(151) | spatial(4)] from raw parts."""
    roi, class_scores, spatial = (np.asarray(v, dtype=np.float64) for v in (roi, class_scores, spatial))
    if roi.shape != (ROI_DIM,) or class_scores.shape != (NUM_OBJECT_CLASSES,) or spatial.shape != (SPATIAL_DIM,):
        raise ValueError("visual feature parts must have lengths 2048, 151 and 4")
    if np.any(spatial < 0.0) or np.any(spatial > 1.0):
        raise ValueError(f"spatial feature {spatial} is not normalised to [0, 1]")
    return np.concatenate([roi, class_scores, spatial])


def assemble_visual_feature(p: ObjectProposal, image_size: tuple[float, float] = (1.0, 1.0),
                            class_scores: np.ndarray | None = None) -> np.ndarray:
    """Concatenate [roi(2048) | class scores(151) | normalised box(4)]."""
    scores = p.class_scores if class_scores is None else class_scores
    return assemble_parts(p.roi_feature, scores, spatial_feature(p.box, image_size))


def project_to_subspace(x_hat: Tensor, w_proj: Tensor) -> Tensor:
    return matmul(x_hat, w_proj)


@lru_cache(maxsize=1)
def _union_projection() -> np.ndarray:
    rng = np.random.default_rng(UNION_PROJECTION_SEED)
    return rng.standard_normal((VISUAL_DIM, UNION_DIM)) / np.sqrt(VISUAL_DIM)


def synthesize_union_feature(a: ObjectProposal, b: ObjectProposal) -> np.ndarray:
    """Union feature for a pair when the detector did not supply one.

    The pair is assembled like a single proposal (union box, mean roi and
    mean class scores) and sent through a fixed random projection to 2048-d.
    """
    box = a.box.union(b.box)
    x_hat = np.concatenate([(a.roi_feature + b.roi_feature) / 2.0,
                            (a.class_scores + b.class_scores) / 2.0,
                            box.as_array()])
    return x_hat @ _union_projection()


# ---------------------------------------------------------------------------
# geometry


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [n, 4] and [m, 4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def union_boxes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([np.minimum(a[:, :2], b[:, :2]), np.maximum(a[:, 2:], b[:, 2:])], axis=1)


def per_class_nms(proposals: Sequence[ObjectProposal], iou_threshold: float = 0.5) -> list[int]:
    """Greedy NMS applied within each detector label.

    Returns kept indices by descending confidence (ties: lower index first).
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].detector_confidence, i))
    kept: list[int] = []
    for i in order:
        p = proposals[i]
        if all(proposals[j].detector_label != p.detector_label or iou(p.box, proposals[j].box) <= iou_threshold
               for j in kept):
            kept.append(i)
    return kept


def canonical_order(confidences: Sequence[float]) -> list[int]:
    """Sequence order fed to the recurrent layer: confidence desc, index asc."""
    return sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))


# ---------------------------------------------------------------------------
# scene files

_F32 = np.dtype("<f4")


def save_scene_file(path, scene: Scene) -> None:
    ann = scene.annotation
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(scene.proposals), len(scene.pairs),
                           len(ann.gt_boxes), len(ann.gt_triplets),
                           ROI_DIM, NUM_OBJECT_CLASSES, SPATIAL_DIM, UNION_DIM)]
    for p in scene.proposals:
        chunks.append(np.asarray(p.box.as_tuple(), dtype=_F32).tobytes())
        chunks.append(np.asarray(p.roi_feature, dtype=_F32).tobytes())
        chunks.append(np.asarray(p.class_scores, dtype=_F32).tobytes())
        chunks.append(struct.pack("<I", p.detector_label))
        chunks.append(np.asarray([p.detector_confidence], dtype=_F32).tobytes())
    for pf in scene.pairs:
        chunks.append(struct.pack("<II", pf.subject_index, pf.object_index))
        chunks.append(np.asarray(pf.union_feature, dtype=_F32).tobytes())
    for box, label in zip(ann.gt_boxes, ann.gt_labels):
        chunks.append(np.asarray(box.as_tuple(), dtype=_F32).tobytes())
        chunks.append(struct.pack("<I", label))
    for s, p, o in ann.gt_triplets:
        chunks.append(struct.pack("<III", s, p, o))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise SceneFormatError(f"{self.path}: truncated {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * n, what), dtype=_F32).astype(np.float64)

    def u32(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n, what))


def load_scene_file(path) -> Scene:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if len(r.buf) < 4 or r.buf[:4] != MAGIC:
        raise SceneFormatError(f"{path}: bad magic bytes at offset 0 (expected {MAGIC!r})")
    _, version, n_prop, n_pairs, n_gt, n_trip, *dims = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"{path}: unsupported format version {version} at offset 4")
    expected = [ROI_DIM, NUM_OBJECT_CLASSES, SPATIAL_DIM, UNION_DIM]
    if dims != expected:
        raise SceneFormatError(f"{path}: header dims {dims} disagree with {expected} at offset 24")
    try:
        proposals = []
        for k in range(n_prop):
            box = BoundingBox.from_array(r.floats(4, f"proposal {k}"))
            roi = r.floats(ROI_DIM, f"proposal {k}")
            scores = r.floats(NUM_OBJECT_CLASSES, f"proposal {k}")
            (label,) = r.u32(1, f"proposal {k}")
            (conf,) = r.floats(1, f"proposal {k}")
            proposals.append(ObjectProposal(box, roi, scores, label, float(conf)))
        pairs = []
        for k in range(n_pairs):
            s, o = r.u32(2, f"pair {k}")
            pairs.append(PairFeature(s, o, r.floats(UNION_DIM, f"pair {k}")))
        boxes, labels = [], []
        for k in range(n_gt):
            boxes.append(BoundingBox.from_array(r.floats(4, f"gt object {k}")))
            labels.append(r.u32(1, f"gt object {k}")[0])
        triplets = [r.u32(3, f"triplet {k}") for k in range(n_trip)]
        ann = SceneAnnotation(tuple(boxes), tuple(labels), tuple(triplets))
        scene = Scene(path.stem, proposals, pairs, ann)
    except ValueError as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"{path}: invalid record before offset {r.pos}: {exc}") from None
    if r.pos != len(r.buf):
        raise SceneFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes at offset {r.pos}")
    return scene


def read_manifest(path) -> list[Path]:
    """Scene paths listed one per line; ``#`` starts a comment.

    Relative entries are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise SceneFormatError(f"cannot read manifest {path}: {exc}") from None
    out = []
    for line in lines:
        entry = line.split("#", 1)[0].strip()
        if entry:
            p = Path(entry)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(path, scene_paths: Sequence, header: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {header}"] if header else []
    for p in scene_paths:
        p = Path(p)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(str(p))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path) -> list[Scene]:
    return [load_scene_file(p) for p in read_manifest(path)]
