"""Binary checkpoint format.

Layout (little-endian)::

    magic        8 bytes  b"NJCKPT\\x00\\x00"
    version      u32      1
    fingerprint  32 bytes sha256 of the resolved run config
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys): step, adam_t,
                 rng, config text and a manifest of {name, dtype, shape,
                 offset, nbytes} for every tensor blob
    blobs        raw tensor bytes, in manifest order

Writing is deterministic, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NJCKPT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sI32sQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    config_text: str
    fingerprint: bytes
    arrays: dict[str, np.ndarray]
    adam_t: int = 0
    rng: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"step": int(ckpt.step), "adam_t": int(ckpt.adam_t), "rng": ckpt.rng,
                         "config": ckpt.config_text, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    if len(ckpt.fingerprint) != 32:
        raise CheckpointError("fingerprint must be 32 bytes")
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, ckpt.fingerprint, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, fingerprint, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = start + hlen
    arrays = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: blob {entry['name']} runs past end of file")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(header["step"], header["config"], fingerprint, arrays,
                      header.get("adam_t", 0), header.get("rng", {}))
