"""Single-file model checkpoints.

Layout: 8-byte magic ``PHVAE01\\n``, little-endian uint64 header length, a
UTF-8 JSON header (architecture descriptor + tensor manifest with shapes and
byte offsets), then the float32 little-endian tensor blobs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..volume import PathLike
from .vae import Architecture, ModelError, VaeParams

MAGIC = b"PHVAE01\n"


def save_checkpoint(params: VaeParams, path: PathLike, extra: dict = None) -> Path:
    path = Path(path)
    manifest, blobs, offset = [], [], 0
    for name, t in params.tensors.items():
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": "phvae-1", "architecture": params.arch.to_dict(), "tensors": manifest}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: PathLike) -> VaeParams:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen].decode())
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(buf):
            raise ModelError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(buf, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return VaeParams(Architecture.from_dict(header["architecture"]), tensors)


def read_header(path: PathLike) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ModelError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode())
