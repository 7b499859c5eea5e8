"""Pair fusion, bias-adapted frequency prior and predicate prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .encoders import uniform_init
from .numeric import ParamStore, Tensor


@dataclass(frozen=True)
class PairPrediction:
    subject_index: int
    object_index: int
    predicate_distribution: np.ndarray
    chosen_predicate: int
    score: float


def init_relation_head(store: ParamStore, rng, d_obj: int = 1024, d_fuse: int = 2048,
                       d_union: int = 2048, n_predicates: int = 50) -> None:
    store.add("pair_proj", uniform_init(rng, (d_obj, d_fuse), d_obj))
    store.add("fuse1.wx", uniform_init(rng, (d_fuse, d_fuse), d_fuse))
    store.add("fuse1.wy", uniform_init(rng, (d_fuse, d_fuse), d_fuse))
    store.add("fuse2.wx", uniform_init(rng, (d_fuse, d_fuse), d_fuse))
    store.add("fuse2.wy", uniform_init(rng, (d_union, d_fuse), d_union))
    store.add("w_r", uniform_init(rng, (d_fuse, n_predicates), d_fuse))
    store.add("w_p", uniform_init(rng, (d_union,), d_union))


def load_relation_head(store: ParamStore) -> dict[str, Tensor]:
    names = ("pair_proj", "fuse1.wx", "fuse1.wy", "fuse2.wx", "fuse2.wy", "w_r", "w_p")
    return {n: store.tensor(n) for n in names}


def bias_term(w_p: Tensor, u: Tensor) -> Tensor:
    """Scalar gate on the softened prior, one per union feature row."""
    if u.shape[-1] != w_p.shape[0]:
        raise nm.ShapeError(f"union feature width {u.shape[-1]} != bias adapter width {w_p.shape[0]}")
    return nm.matmul(u, w_p)


def fuse(x: Tensor, y: Tensor, w_x: Tensor, w_y: Tensor) -> Tensor:
    """(W_x x + W_y y) - (W_x x - W_y y)^2, elementwise square."""
    a, b = x @ w_x, y @ w_y
    if a.shape != b.shape:
        raise nm.ShapeError(f"fusion projections disagree: {a.shape} vs {b.shape}")
    diff = a - b
    return (a + b) - nm.hadamard(diff, diff)


def pair_logits(o_subj: Tensor, o_obj: Tensor, u: Tensor, params) -> Tensor:
    """Predicate logits from projected pair representations and union features.

    The three-way fusion is applied left to right with two parameter sets.
    """
    f = fuse(o_subj, o_obj, params["fuse1.wx"], params["fuse1.wy"])
    f = fuse(f, u, params["fuse2.wx"], params["fuse2.wy"])
    return f @ params["w_r"]


def predict_relation(logits: Tensor, d: Tensor | float, p_tilde) -> Tensor:
    """softmax(logits + d * softened prior), rowwise when batched."""
    p_tilde = p_tilde if isinstance(p_tilde, Tensor) else nm.constant(p_tilde)
    if not isinstance(d, Tensor):
        d = nm.constant(d)
    if d.ndim == 1 and logits.ndim == 2:
        d = nm.reshape(d, (-1, 1))
    return nm.softmax(logits + nm.mul(d, p_tilde), axis=-1)


def argmax_relation(dist) -> int:
    """Index of the largest probability; the lowest index wins ties."""
    return int(np.argmax(np.asarray(dist.data if isinstance(dist, Tensor) else dist)))
