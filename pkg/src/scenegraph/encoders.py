"""Object communication (BiGRU) and the object/edge transformer encoders.

Parameters live in a ParamStore; ``init_*`` functions register them and
``load_*`` functions fetch the live tensors for one forward pass.  The
forward functions are pure in their tensor arguments.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import numeric as nm
from .numeric import ParamStore, Tensor

GRU_KEYS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
# large finite negative: masked scores underflow to exactly zero after exp
MASK_VALUE = -1e30


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# recurrent layer


def init_gru_cell(store: ParamStore, prefix: str, d_in: int, d_hidden: int, rng) -> None:
    for gate in "zrh":
        store.add(f"{prefix}.w_{gate}", uniform_init(rng, (d_in, d_hidden), d_in))
        store.add(f"{prefix}.u_{gate}", uniform_init(rng, (d_hidden, d_hidden), d_hidden))
        store.add(f"{prefix}.b_{gate}", uniform_init(rng, (d_hidden,), d_hidden))


def load_gru_cell(store: ParamStore, prefix: str) -> dict[str, Tensor]:
    return {k: store.tensor(f"{prefix}.{k}") for k in GRU_KEYS}


def gru_step(cell: Mapping[str, Tensor], x: Tensor, h: Tensor) -> Tensor:
    """One gated recurrent update; works on a single vector or a batch of rows."""
    z = nm.sigmoid(x @ cell["w_z"] + h @ cell["u_z"] + cell["b_z"])
    r = nm.sigmoid(x @ cell["w_r"] + h @ cell["u_r"] + cell["b_r"])
    h_cand = nm.tanh(x @ cell["w_h"] + nm.mul(r, h) @ cell["u_h"] + cell["b_h"])
    return nm.mul(1.0 - z, h) + nm.mul(z, h_cand)


def _run_direction(cell, X: Tensor, sequences: list[list[int]]) -> Tensor:
    d_hidden = cell["u_z"].shape[0]
    order = sorted(range(len(sequences)), key=lambda s: -len(sequences[s]))
    seqs = [sequences[s] for s in order]
    steps, emitted = [], []
    h = None
    for t in range(len(seqs[0])):
        active = sum(1 for s in seqs if len(s) > t)
        rows = [s[t] for s in seqs[:active]]
        if h is None:
            h = nm.constant(np.zeros((active, d_hidden)))
        elif active < h.shape[0]:
            h = nm.take(h, np.arange(active))
        h = gru_step(cell, nm.take(X, rows), h)
        steps.append(h)
        emitted.extend(rows)
    position = np.empty(len(emitted), dtype=np.intp)
    position[np.asarray(emitted)] = np.arange(len(emitted))
    return nm.take(nm.concat(steps, axis=0), position)


def bigru_forward(fwd: Mapping[str, Tensor], bwd: Mapping[str, Tensor], X: Tensor,
                  sequences: Sequence[Sequence[int]] | None = None) -> Tensor:
    """Bidirectional GRU over the rows of ``X``.

    ``sequences`` partitions the rows into independent sequences, each listed
    in reading order (default: one sequence, rows in order).  Row i of the
    result is [forward state_i | backward state_i], both from zero initial state.
    """
    n = X.shape[0]
    if n == 0:
        raise nm.ShapeError("bigru_forward needs at least one row")
    seqs = [list(s) for s in (sequences if sequences is not None else [range(n)]) if len(s)]
    if sorted(i for s in seqs for i in s) != list(range(n)):
        raise ValueError("sequences must partition the input rows")
    forward = _run_direction(fwd, X, seqs)
    backward = _run_direction(bwd, X, [s[::-1] for s in seqs])
    return nm.concat([forward, backward], axis=1)


def post_gru_projection(o_hat: Tensor, w: Tensor) -> Tensor:
    return nm.matmul(o_hat, w)


# ---------------------------------------------------------------------------
# transformer encoder


def init_block(store: ParamStore, prefix: str, rng, d_model: int = 512, n_heads: int = 8,
               d_head: int = 64, d_ff: int = 2048) -> None:
    for k in range(n_heads):
        for part in "qkv":
            store.add(f"{prefix}.head{k}.{part}", uniform_init(rng, (d_model, d_head), d_model))
    store.add(f"{prefix}.proj", uniform_init(rng, (n_heads * d_head, d_model), n_heads * d_head))
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.gain", np.ones(d_model))
        store.add(f"{prefix}.{ln}.bias", np.zeros(d_model))
    store.add(f"{prefix}.ffn1.w", uniform_init(rng, (d_model, d_ff), d_model))
    store.add(f"{prefix}.ffn1.b", uniform_init(rng, (d_ff,), d_model))
    store.add(f"{prefix}.ffn2.w", uniform_init(rng, (d_ff, d_model), d_ff))
    store.add(f"{prefix}.ffn2.b", uniform_init(rng, (d_model,), d_ff))


def load_block(store: ParamStore, prefix: str, n_heads: int) -> dict:
    t = store.tensor
    return {
        "heads": [tuple(t(f"{prefix}.head{k}.{part}") for part in "qkv") for k in range(n_heads)],
        "proj": t(f"{prefix}.proj"),
        "ln1": (t(f"{prefix}.ln1.gain"), t(f"{prefix}.ln1.bias")),
        "ln2": (t(f"{prefix}.ln2.gain"), t(f"{prefix}.ln2.bias")),
        "ffn1": (t(f"{prefix}.ffn1.w"), t(f"{prefix}.ffn1.b")),
        "ffn2": (t(f"{prefix}.ffn2.w"), t(f"{prefix}.ffn2.b")),
    }


def init_stack(store: ParamStore, prefix: str, rng, n_blocks: int = 6, **dims) -> None:
    for i in range(n_blocks):
        init_block(store, f"{prefix}.block{i}", rng, **dims)


def load_stack(store: ParamStore, prefix: str, n_blocks: int, n_heads: int) -> list[dict]:
    return [load_block(store, f"{prefix}.block{i}", n_heads) for i in range(n_blocks)]


def multi_head_attention(block: Mapping, X: Tensor, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention per head, heads concatenated then projected.

    ``mask`` is an additive [n, n] array (0 where attention is allowed).
    """
    zs, weights = [], []
    for wq, wk, wv in block["heads"]:
        q, k, v = X @ wq, X @ wk, X @ wv
        scores = nm.scale(q @ nm.transpose(k), 1.0 / math.sqrt(wq.shape[1]))
        if mask is not None:
            scores = scores + nm.constant(mask)
        a = nm.softmax(scores, axis=1)
        weights.append(a)
        zs.append(a @ v)
    z = zs[0] if len(zs) == 1 else nm.concat(zs, axis=1)
    out = z @ block["proj"]
    return (out, weights) if return_weights else out


def feed_forward(block: Mapping, X: Tensor) -> Tensor:
    (w1, b1), (w2, b2) = block["ffn1"], block["ffn2"]
    return nm.relu(X @ w1 + b1) @ w2 + b2


def encoder_block(block: Mapping, X: Tensor, mask: np.ndarray | None = None) -> Tensor:
    y = nm.layer_norm(X + multi_head_attention(block, X, mask), *block["ln1"])
    return nm.layer_norm(y + feed_forward(block, y), *block["ln2"])


def encoder_stack(blocks: Sequence[Mapping], X: Tensor, mask: np.ndarray | None = None) -> Tensor:
    for block in blocks:
        X = encoder_block(block, X, mask)
    return X


def object_transformer(blocks, X: Tensor, w_o: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Returns (context features Z6, per-object class distribution)."""
    z6 = encoder_stack(blocks, X, mask)
    return z6, nm.softmax(z6 @ w_o, axis=1)


def edge_transformer(blocks, z6: Tensor, mask=None) -> Tensor:
    return encoder_stack(blocks, z6, mask)


def segment_mask(segments: Sequence[Sequence[int]], n: int) -> np.ndarray | None:
    """Additive mask that keeps attention inside each segment of rows."""
    if len(segments) <= 1:
        return None
    seg = np.empty(n, dtype=np.intp)
    for s, rows in enumerate(segments):
        seg[list(rows)] = s
    return np.where(seg[:, None] == seg[None, :], 0.0, MASK_VALUE)
