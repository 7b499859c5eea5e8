"""The full relation model over a batch of scenes.

Rows of every scene in a batch are stacked; attention is masked to stay
within a scene and the recurrent layer runs each scene as its own sequence,
so a batch forward equals the per-scene forwards stacked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .encoders import (bigru_forward, encoder_stack, init_gru_cell, init_stack, load_gru_cell,
                       load_stack, segment_mask, uniform_init)
from .numeric import ParamStore, Tensor
from .prior import FrequencyPrior
from .relation import fuse, init_relation_head, load_relation_head
from .scene import NUM_OBJECT_CLASSES, NUM_PREDICATES, UNION_DIM, VISUAL_DIM, canonical_order


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    d_head: int = 64
    n_heads: int = 8
    d_ff: int = 2048
    n_blocks: int = 6
    d_fuse: int = 2048
    bigru_layers: int = 1
    bigru: bool = True
    transformer: bool = True
    fs_ba: bool = True


@dataclass
class SceneInput:
    """Model-ready arrays for one scene.

    ``labels`` are the object classes used to index the prior; when None the
    model's own foreground argmax is used.
    """

    x_hat: np.ndarray
    confidences: np.ndarray
    pairs: np.ndarray
    union: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n_objects(self) -> int:
        return self.x_hat.shape[0]


@dataclass
class ForwardOutput:
    class_logits: Tensor
    rel_scores: Tensor
    object_offsets: np.ndarray
    pair_offsets: np.ndarray
    prior_labels: np.ndarray

    def class_dist(self) -> np.ndarray:
        return nm.softmax(nm.constant(self.class_logits.data), axis=1).data

    def rel_dist(self) -> np.ndarray:
        return nm.softmax(nm.constant(self.rel_scores.data), axis=1).data


def gru_prefix(layer: int) -> str:
    return "bigru" if layer == 0 else f"bigru{layer}"


def proj_gru_name(layer: int) -> str:
    return "proj_gru" if layer == 0 else f"proj_gru{layer}"


def parameter_group(name: str) -> str:
    """Component a parameter belongs to, e.g. ``obj_enc.block2.attention`` or ``bigru.fwd``.

    Per-head query/key/value matrices and the output projection form one
    attention group; the two feed-forward layers and the two norms form one
    group each.
    """
    parts = name.split(".")
    if len(parts) >= 3 and parts[0] in ("obj_enc", "edge_enc"):
        leaf = parts[2]
        kind = "ffn" if leaf.startswith("ffn") else "norm" if leaf.startswith("ln") else "attention"
        return f"{parts[0]}.{parts[1]}.{kind}"
    return name.rsplit(".", 1)[0] if "." in name else name


class SceneGraphModel:
    def __init__(self, config: ModelConfig, prior: FrequencyPrior, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.prior = prior
        if store is None:
            store = ParamStore()
            init_model_params(store, config, np.random.default_rng(seed))
        self.store = store

    def forward(self, scenes: list[SceneInput]) -> ForwardOutput:
        cfg, store = self.config, self.store
        obj_off = np.cumsum([0] + [s.n_objects for s in scenes])
        pair_off = np.cumsum([0] + [len(s.pairs) for s in scenes])
        n = int(obj_off[-1])
        segments = [list(range(obj_off[i], obj_off[i + 1])) for i in range(len(scenes))]

        x = nm.constant(np.concatenate([s.x_hat for s in scenes], axis=0)) @ store.tensor("proj_in")
        if cfg.bigru:
            sequences = [[int(obj_off[i]) + j for j in canonical_order(s.confidences)]
                         for i, s in enumerate(scenes)]
            for layer in range(cfg.bigru_layers):
                fwd = load_gru_cell(store, f"{gru_prefix(layer)}.fwd")
                bwd = load_gru_cell(store, f"{gru_prefix(layer)}.bwd")
                x = bigru_forward(fwd, bwd, x, sequences) @ store.tensor(proj_gru_name(layer))
        if cfg.transformer:
            mask = segment_mask(segments, n)
            z6 = encoder_stack(load_stack(store, "obj_enc", cfg.n_blocks, cfg.n_heads), x, mask)
            edges = encoder_stack(load_stack(store, "edge_enc", cfg.n_blocks, cfg.n_heads), z6, mask)
        else:
            z6 = edges = x
        class_logits = z6 @ store.tensor("w_o")

        prior_labels = np.empty(n, dtype=np.intp)
        for i, s in enumerate(scenes):
            rows = slice(obj_off[i], obj_off[i + 1])
            if s.labels is not None:
                prior_labels[rows] = s.labels
            else:
                prior_labels[rows] = 1 + np.argmax(class_logits.data[rows, 1:], axis=1)

        if pair_off[-1] == 0:
            return ForwardOutput(class_logits, nm.constant(np.zeros((0, NUM_PREDICATES))),
                                 obj_off, pair_off, prior_labels)
        head = load_relation_head(store)
        o_prime = nm.concat([z6, edges], axis=1) @ head["pair_proj"]
        subj = np.concatenate([s.pairs[:, 0] + obj_off[i] for i, s in enumerate(scenes) if len(s.pairs)])
        obj = np.concatenate([s.pairs[:, 1] + obj_off[i] for i, s in enumerate(scenes) if len(s.pairs)])
        u = nm.constant(np.concatenate([s.union for s in scenes if len(s.pairs)], axis=0))
        f = fuse(nm.take(o_prime, subj), nm.take(o_prime, obj), head["fuse1.wx"], head["fuse1.wy"])
        f = fuse(f, u, head["fuse2.wx"], head["fuse2.wy"])
        rel_scores = f @ head["w_r"]
        if cfg.fs_ba:
            d = nm.reshape(u @ head["w_p"], (-1, 1))
            p_tilde = self.prior.slices(prior_labels[subj], prior_labels[obj])
            rel_scores = rel_scores + nm.mul(d, nm.constant(p_tilde))
        return ForwardOutput(class_logits, rel_scores, obj_off, pair_off, prior_labels)


def init_model_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    store.add("proj_in", uniform_init(rng, (VISUAL_DIM, cfg.d_model), VISUAL_DIM))
    if cfg.bigru:
        for layer in range(cfg.bigru_layers):
            init_gru_cell(store, f"{gru_prefix(layer)}.fwd", cfg.d_model, cfg.d_model, rng)
            init_gru_cell(store, f"{gru_prefix(layer)}.bwd", cfg.d_model, cfg.d_model, rng)
            store.add(proj_gru_name(layer), uniform_init(rng, (2 * cfg.d_model, cfg.d_model), 2 * cfg.d_model))
    if cfg.transformer:
        dims = dict(d_model=cfg.d_model, n_heads=cfg.n_heads, d_head=cfg.d_head, d_ff=cfg.d_ff)
        init_stack(store, "obj_enc", rng, n_blocks=cfg.n_blocks, **dims)
        init_stack(store, "edge_enc", rng, n_blocks=cfg.n_blocks, **dims)
    store.add("w_o", uniform_init(rng, (cfg.d_model, NUM_OBJECT_CLASSES), cfg.d_model))
    init_relation_head(store, rng, d_obj=2 * cfg.d_model, d_fuse=cfg.d_fuse, d_union=UNION_DIM,
                       n_predicates=NUM_PREDICATES)
