"""Binary checkpoints: a JSON manifest followed by float32 payloads.

Layout::

    b"DTCK" | uint32 LE manifest length | manifest (UTF-8 JSON) | payloads

The manifest records the format version, the model spec, provenance and an
entry table (name, kind, shape) in payload order.  Payloads are
little-endian float32, concatenated without padding.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ParamSet
from .network import ModelSpec

MAGIC = b"DTCK"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save(params: ParamSet, spec: ModelSpec, path, provenance: Optional[dict] = None) -> None:
    expected = spec.param_shapes()
    if params.shapes() != expected:
        raise CheckpointError(f"parameters do not match the model spec: {params.shapes()} vs {expected}")
    entries, payloads = [], []
    for name, t in params.items():
        entries.append({"name": name, "kind": "param", "shape": list(t.shape)})
        payloads.append(t.data)
    for name, v in params.buffers.items():
        entries.append({"name": name, "kind": "buffer", "shape": list(v.shape)})
        payloads.append(v)
    manifest = {
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "provenance": provenance or {},
        "entries": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for arr in payloads:
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError(f"{path}: truncated header")
    (size,) = struct.unpack("<I", raw)
    head = f.read(size)
    if len(head) != size:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('version')!r}")
    return manifest


def load(path) -> tuple[ParamSet, ModelSpec, dict]:
    """Return ``(params, spec, provenance)``.

    Every entry shape is checked against the stored spec before any
    payload byte is read.
    """
    path = Path(path)
    with open(path, "rb") as f:
        manifest = _read_header(f, path)
        try:
            spec = ModelSpec.from_dict(manifest["spec"])
            expected = {**spec.param_shapes(), **spec.buffer_shapes()}
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: invalid model spec ({e})") from None
        entries = manifest.get("entries", [])
        seen = set()
        for e in entries:
            name, shape = e["name"], tuple(e["shape"])
            if expected.get(name) != shape:
                raise CheckpointError(f"{path}: entry {name!r} has shape {shape}, spec expects {expected.get(name)}")
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise CheckpointError(f"{path}: missing entries {sorted(missing)}")

        params = ParamSet()
        for e in entries:
            shape = tuple(e["shape"])
            nbytes = _DTYPE.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: payload for {e['name']!r} has {len(raw)} bytes, expected {nbytes}")
            value = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(shape)
            if e["kind"] == "param":
                params.add(e["name"], value)
            else:
                params.buffers[e["name"]] = value
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last payload")
    return params, spec, manifest.get("provenance", {})


def round_trip_precision(params: ParamSet) -> ParamSet:
    """Copy of ``params`` with every value rounded to float32, as stored."""
    out = params.copy()
    for _, t in out.items():
        t.data = t.data.astype(_DTYPE).astype(np.float64)
    out.buffers = type(out.buffers)((k, v.astype(_DTYPE).astype(np.float64)) for k, v in out.buffers.items())
    return out
