"""Versioned single-file container: a JSON manifest followed by raw blobs.

Layout::

    b"EGOC"  | uint32 LE version | uint64 LE manifest length | manifest (UTF-8 JSON) | blobs

The manifest carries arbitrary metadata plus a ``tensors`` index mapping each
blob name to ``{"offset", "shape", "dtype"}`` (offset relative to the start
of the blob section). Blobs are little-endian float32 unless the index says
otherwise. Unknown manifest fields are preserved and ignored.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EGOC"
VERSION = 1
_ALLOWED = {"<f4", "<i4"}


class ContainerError(ValueError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        index[name] = {"offset": offset, "shape": list(arr.shape), "dtype": dtype}
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta or {})
    manifest["version"] = VERSION
    manifest["tensors"] = index
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict, dict]:
    if buf[:4] != MAGIC:
        raise ContainerError("not an EGOC container")
    version, n = struct.unpack("<IQ", buf[4:16])
    if version > VERSION:
        raise ContainerError(f"container version {version} is newer than supported {VERSION}")
    manifest = json.loads(buf[16:16 + n].decode())
    if "version" not in manifest:
        raise ContainerError("manifest lacks a version field")
    body = memoryview(buf)[16 + n:]
    tensors, used = {}, 0
    for name, entry in manifest.get("tensors", {}).items():
        dtype = entry.get("dtype", "<f4")
        if dtype not in _ALLOWED:
            raise ContainerError(f"blob {name}: unsupported dtype {dtype}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if start < 0 or start + nbytes > len(body):
            raise ContainerError(f"blob {name}: shape {shape} does not fit the stored bytes")
        tensors[name] = np.frombuffer(body[start:start + nbytes], dtype=dtype).reshape(shape).copy()
        used += nbytes
    if used != len(body):
        raise ContainerError(f"blob section has {len(body)} bytes, index accounts for {used}")
    return manifest, tensors


def save(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes())
