"""Binary checkpoint container.

Layout (little-endian)::

    b"VIPGCKPT" | u32 version | u32 n | n bytes of JSON header
    u32 tensor count | per tensor: u32 name length, name, u32 rank, u32 dims..., f32 payload

The JSON header carries the model config plus whatever metadata the caller
adds (vocab hash, training step, ...). Tensor order is the insertion order
of the mapping, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, ModelError, ParaphraseModel, parameter_shapes
from . import numerics as nx

MAGIC = b"VIPGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, header: dict, tensors: Mapping[str, np.ndarray]):
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(take(size), dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header, tensors


def save_model(path: str | Path, model: ParaphraseModel, **meta):
    header = {"kind": "model", "config": model.cfg.to_dict(), **meta}
    write_container(path, header, {k: v.data for k, v in model.params.items()})


def load_model(path: str | Path, vocab_sha256: str | None = None) -> tuple[ParaphraseModel, dict]:
    """Rebuild the model; the name set and shapes must match the stored config."""
    header, tensors = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        cfg = ModelConfig.from_dict(header["config"]).validate()
    except (KeyError, TypeError, ModelError) as e:
        raise CheckpointError(f"{path}: bad model config: {e}") from e
    if vocab_sha256 is not None and header.get("vocab_sha256") not in (None, vocab_sha256):
        raise CheckpointError(f"{path}: checkpoint was trained with a different vocabulary")
    expected = parameter_shapes(cfg)
    if set(tensors) != set(expected):
        raise CheckpointError(f"{path}: tensor names differ from config: "
                              f"missing {sorted(set(expected) - set(tensors))}, "
                              f"unexpected {sorted(set(tensors) - set(expected))}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    params = {name: nx.parameter(tensors[name], name=name) for name in expected}
    return ParaphraseModel(cfg, params), header
