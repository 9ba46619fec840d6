"""Versioned checkpoint container.

Layout::

    b"FDMCKPT\\0" | u32 version | u64 header length | header JSON | tensor blob

The header is canonical JSON (sorted keys, compact) describing the kind,
config echo, metadata and every tensor's name, dtype, shape and byte range
in the blob. Tensors are stored little-endian in ``state_dict`` order. The
checkpoint id is the SHA-256 of the serialized bytes, so it is never stored
in the file itself and identical content always yields the same id.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np
import torch

MAGIC = b"FDMCKPT\x00"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    meta: dict
    state: Dict[str, torch.Tensor]

    def to_bytes(self) -> bytes:
        blob = io.BytesIO()
        tensors = []
        for name, tensor in self.state.items():
            tensor = tensor.detach().cpu().contiguous()
            if tensor.dtype not in _DTYPES:
                raise TypeError(f"unsupported dtype {tensor.dtype} for {name}")
            raw = tensor.numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
            tensors.append({"name": name, "dtype": _DTYPES[tensor.dtype], "shape": list(tensor.shape),
                            "offset": blob.tell(), "nbytes": len(raw)})
            blob.write(raw)
        header = json.dumps({"kind": self.kind, "config": self.config, "meta": self.meta, "tensors": tensors},
                            sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + blob.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, header_len = struct.unpack_from("<IQ", data, 8)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = 8 + struct.calcsize("<IQ")
        header = json.loads(data[start:start + header_len])
        blob = memoryview(data)[start + header_len:]
        state = {}
        for t in header["tensors"]:
            arr = np.frombuffer(blob[t["offset"]:t["offset"] + t["nbytes"]], dtype=t["dtype"])
            state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
        return cls(header["kind"], header["config"], header["meta"], state)

    @property
    def checkpoint_id(self) -> str:
        return content_id(self.to_bytes())

    def save(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
        return content_id(data)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]
