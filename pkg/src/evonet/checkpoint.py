"""Binary model checkpoints.

Layout (all little-endian)::

    b"EVNC"  u32 version  u32 manifest_bytes  manifest (UTF-8 JSON)
    float64 tensors, concatenated in manifest order

The manifest lists every layer with its kind, constructor config and the
names/shapes of its parameter and buffer tensors, plus a free-form ``meta``
object (genome, config digest, ...).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import BatchNorm, Conv, Network, ReflectPad, ReLU

MAGIC = b"EVNC"
VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _manifest(net: Network, meta: dict | None) -> dict:
    layers = []
    for layer in net.layers:
        tensors = [{"name": n, "shape": list(a.shape)}
                   for n, a in list(layer.params.items()) + list(layer.buffers.items())]
        layers.append({"kind": layer.kind, "config": layer.config(), "tensors": tensors})
    return {"layers": layers, "meta": meta or {}}


def dumps_checkpoint(net: Network, meta: dict | None = None) -> bytes:
    manifest = json.dumps(_manifest(net, meta), sort_keys=True).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, len(manifest)), manifest]
    for layer in net.layers:
        for arr in list(layer.params.values()) + list(layer.buffers.values()):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(net, meta))


def digest(net: Network) -> str:
    return hashlib.sha256(dumps_checkpoint(net)).hexdigest()


def loads_checkpoint(raw: bytes) -> tuple[Network, dict]:
    if len(raw) < _HEAD.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, n_manifest = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[_HEAD.size:_HEAD.size + n_manifest])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    offset = _HEAD.size + n_manifest
    layers = []
    for entry in manifest["layers"]:
        tensors = {}
        for t in entry["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            end = offset + 8 * count
            if end > len(raw):
                raise CheckpointError(f"checkpoint truncated in tensor {t['name']}")
            tensors[t["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t["shape"]).copy()
            offset = end
        kind, cfg = entry["kind"], entry["config"]
        if kind == "conv":
            layer = Conv(tensors["weight"], tensors["bias"])
        elif kind == "reflect_pad":
            layer = ReflectPad(cfg["pad"])
        elif kind == "batch_norm":
            layer = BatchNorm(cfg["channels"], cfg["momentum"], cfg["eps"])
            layer.params.update(gamma=tensors["gamma"], beta=tensors["beta"])
            layer.buffers.update(running_mean=tensors["running_mean"], running_var=tensors["running_var"])
            layer.zero_grad()
        elif kind == "relu":
            layer = ReLU()
        else:
            raise CheckpointError(f"unknown layer kind {kind!r}")
        layers.append(layer)
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after tensors")
    return Network(layers).eval(), manifest["meta"]


def load_checkpoint(path) -> tuple[Network, dict]:
    return loads_checkpoint(Path(path).read_bytes())
