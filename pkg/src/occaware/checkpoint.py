"""Binary weight container shared by the detector and backbone checkpoints.

Layout (little endian)::

    magic    4 bytes  b"OCKP"
    version  uint32
    count    uint32                       number of tensors
    count x:
        name_len uint16, name utf-8
        ndim     uint8,  dims uint32[ndim]
        payload  float32[prod(dims)]      row-major

A ``<file>.json`` sidecar holds the model config and training metrics.
Names use dotted module paths; injector weights live under ``injector.``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"OCKP"
VERSION = 1


def save_checkpoint(path: Path, tensors: Mapping[str, torch.Tensor], sidecar: dict | None = None) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(sidecar or {}, indent=2, sort_keys=True))


def load_checkpoint(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return tensors, sidecar
