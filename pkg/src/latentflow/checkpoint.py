"""Checkpoint container.

Layout (little-endian): ASCII header line ``VFCKPT 1``, a u32-length-prefixed
JSON metadata document (model config, schedule spec, training stage tag, EMA
flag), a tensor table (u32 count; per tensor: u16 name length + utf-8 name,
4-byte dtype tag ``f32``, u8 rank, u32 dims, u64 byte offset into the
payload), then the raw float32 payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

HEADER = b"VFCKPT 1\n"
DTYPE_TAG = b"f32 "

STAGES = ("flow", "distilled", "post-trained", "codec", "discriminator", "init")


def save_checkpoint(path, params: dict, metadata: dict, ema: dict | None = None) -> None:
    named = dict(params)
    if ema is not None:
        named.update({f"ema/{k}": v for k, v in ema.items()})
    metadata = dict(metadata)
    metadata["ema"] = ema is not None
    names = sorted(named)
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")

    table = b""
    payload_parts = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb + DTYPE_TAG + struct.pack("<B", arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        table += struct.pack("<Q", offset)
        payload_parts.append(arr.tobytes())
        offset += arr.nbytes

    with open(path, "wb") as f:
        f.write(HEADER)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(names)))
        f.write(table)
        f.write(b"".join(payload_parts))


def load_checkpoint(path):
    """Returns (params, metadata, ema-or-None)."""
    with open(path, "rb") as f:
        if f.read(len(HEADER)) != HEADER:
            raise ValueError(f"load_checkpoint: {path} is not a VFCKPT 1 container")
        (mlen,) = struct.unpack("<I", f.read(4))
        metadata = json.loads(f.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            tag = f.read(4)
            if tag != DTYPE_TAG:
                raise ValueError(f"load_checkpoint: unsupported dtype tag {tag!r}")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            (offset,) = struct.unpack("<Q", f.read(8))
            entries.append((name, dims, offset))
        payload = f.read()
    params, ema = {}, {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        if name.startswith("ema/"):
            ema[name[4:]] = arr
        else:
            params[name] = arr
    return params, metadata, (ema if ema else None)
