"""Model checkpoint container.

Layout: ``XLAB1`` magic, a newline, the manifest as canonical JSON (sorted
keys, no whitespace), a newline, then every parameter as raw little-endian
float32 in manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import Sequential

MAGIC = b"XLAB1"


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(model: Sequential, optimizer: str | None = None, meta: dict | None = None) -> bytes:
    params = model.named_parameters()
    manifest = {
        "model": model.config(),
        "optimizer": optimizer,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "meta": meta or {},
    }
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in params)
    return MAGIC + b"\n" + canonical_json(manifest) + b"\n" + body


def loads(blob: bytes) -> tuple[Sequential, dict]:
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError("missing XLAB1 magic")
    end = blob.find(b"\n", len(MAGIC) + 1)
    if end < 0:
        raise CheckpointError("unterminated manifest")
    manifest = json.loads(blob[len(MAGIC) + 1:end])
    model = Sequential.from_config(manifest["model"])
    params = model.named_parameters()
    if [n for n, _ in params] != [e["name"] for e in manifest["params"]]:
        raise CheckpointError("manifest parameter list does not match the model layout")
    offset = end + 1
    for (_, p), entry in zip(params, manifest["params"]):
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(f"parameter shape {shape} does not match layer shape {p.shape}")
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {offset + nbytes} bytes, have {len(blob)}")
        p.data = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after parameters")
    return model, manifest


def save(path, model: Sequential, optimizer: str | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, optimizer, meta))


def load(path) -> tuple[Sequential, dict]:
    return loads(Path(path).read_bytes())
