"""Checkpoint files: a JSON header followed by raw little-endian float64 tensors.

Layout: b"BGTC", u32 version, u64 header length, UTF-8 JSON header, tensor
bytes in header order.  The header is written with sorted keys and no
timestamps, so equal contents give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .numeric import ParamStore
from .prior import FrequencyPrior

MAGIC = b"BGTC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)
    prior: FrequencyPrior | None = None
    iteration: int = 0
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name in sorted(self.params):
            store.add(name, self.params[name])
        return store

    @classmethod
    def from_store(cls, store: ParamStore, **kw) -> Checkpoint:
        return cls(params={n: v.copy() for n, v in store.items()}, **kw)


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{n}", ckpt.params[n]) for n in sorted(ckpt.params)]
    if ckpt.prior is not None:
        for part in ("counts", "probabilities", "softened"):
            arr = getattr(ckpt.prior, part)
            if arr is not None:
                out.append((f"prior/{part}", arr))
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = _tensors(ckpt)
    offset, entries = 0, []
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": VERSION,
        "config": ckpt.config.to_dict() if ckpt.config else None,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=_F64).data)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size or prefix[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic at offset 0)")
        _, version, n = _PREFIX.unpack(prefix)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(n))
        except ValueError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
        body_start = _PREFIX.size + n
        params, prior_parts = {}, {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            f.seek(body_start + entry["offset"])
            arr = np.fromfile(f, dtype=_F64, count=count)
            if arr.size != count:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            arr = arr.astype(np.float64).reshape(entry["shape"])
            kind, name = entry["name"].split("/", 1)
            (params if kind == "param" else prior_parts)[name] = arr
    prior = None
    if "counts" in prior_parts:
        prior = FrequencyPrior(prior_parts["counts"], prior_parts.get("probabilities"), prior_parts.get("softened"))
    config = TrainConfig.from_dict(header["config"]) if header["config"] else None
    return Checkpoint(config, params, prior, header["iteration"], header["rng_state"], header["metadata"])
