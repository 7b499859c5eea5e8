"""Empirical subject/object-class -> predicate distribution and its softened form."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .scene import NUM_OBJECT_CLASSES, NUM_PREDICATES, SceneAnnotation


@dataclass
class FrequencyPrior:
    counts: np.ndarray
    probabilities: np.ndarray | None = None
    softened: np.ndarray | None = None

    @classmethod
    def empty(cls, n_classes: int = NUM_OBJECT_CLASSES, n_predicates: int = NUM_PREDICATES) -> FrequencyPrior:
        return cls(np.zeros((n_classes, n_classes, n_predicates)))

    @property
    def n_predicates(self) -> int:
        return self.counts.shape[-1]

    def slices(self, subject_classes, object_classes) -> np.ndarray:
        """Softened prior rows for each (subject, object) class pair."""
        if self.softened is None:
            raise ValueError("prior has not been softened yet")
        return self.softened[np.asarray(subject_classes, dtype=np.intp), np.asarray(object_classes, dtype=np.intp)]

    def top_predicates(self, subject_class: int, object_class: int, k: int = 5) -> list[tuple[int, float]]:
        p = self.probabilities[subject_class, object_class]
        order = sorted(range(len(p)), key=lambda r: (-p[r], r))[:k]
        return [(r, float(p[r])) for r in order]


def count_from_annotations(scenes: Iterable[SceneAnnotation], n_classes: int = NUM_OBJECT_CLASSES,
                           n_predicates: int = NUM_PREDICATES) -> FrequencyPrior:
    prior = FrequencyPrior.empty(n_classes, n_predicates)
    for ann in scenes:
        for s, p, o in ann.gt_triplets:
            prior.counts[ann.gt_labels[s], ann.gt_labels[o], p] += 1
    return prior


def to_probabilities(prior: FrequencyPrior) -> FrequencyPrior:
    """Normalise each (subject, object) slice; unseen pairs get a uniform row."""
    totals = prior.counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(prior.counts, 1.0 / prior.n_predicates)
    with np.errstate(invalid="ignore", divide="ignore"):
        prior.probabilities = np.where(totals > 0, prior.counts / np.where(totals > 0, totals, 1.0), uniform)
    return prior


def soften(prior: FrequencyPrior) -> FrequencyPrior:
    """Slice-wise log-softmax of the probabilities."""
    if prior.probabilities is None:
        raise ValueError("probabilities must be computed before softening")
    p = prior.probabilities
    shifted = p - p.max(axis=-1, keepdims=True)
    prior.softened = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return prior


def build_prior(scenes: Iterable[SceneAnnotation]) -> FrequencyPrior:
    return soften(to_probabilities(count_from_annotations(scenes)))


def zero_shot_triples(train: Iterable[SceneAnnotation], evaluation: Iterable[SceneAnnotation]) -> set[tuple[int, int, int]]:
    """(subject class, predicate, object class) triples in evaluation gt never seen in training."""
    seen = {(a.gt_labels[s], p, a.gt_labels[o]) for a in train for s, p, o in a.gt_triplets}
    return {(a.gt_labels[s], p, a.gt_labels[o]) for a in evaluation for s, p, o in a.gt_triplets} - seen


def format_top_predicates(prior: FrequencyPrior, pairs, k: int = 5, vocab=None) -> str:
    lines = []
    for s, o in pairs:
        tops = prior.top_predicates(s, o, k)
        total = int(prior.counts[s, o].sum())
        name = (lambda c: vocab.object_names[c]) if vocab else str
        pname = (lambda r: vocab.predicate_names[r]) if vocab else str
        body = ", ".join(f"{pname(r)}={p:.4f}" for r, p in tops)
        lines.append(f"{name(s)} -> {name(o)} (n={total}): {body}")
    return "\n".join(lines)
