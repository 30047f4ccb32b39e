"""Binary parameter checkpoints.

Layout: ``b"NNCKPT1\\n"``, then per block a u32 LE name length, the UTF-8
name, a u32 rank, ``rank`` u32 dims and the raw little-endian float64 values
in row-major order.
"""
from __future__ import annotations

import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"NNCKPT1\n"


class CheckpointError(ValueError):
    pass


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_params(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    out: Dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return out


def assign_params(params: Mapping[str, "object"], values: Mapping[str, np.ndarray]) -> None:
    """Copy loaded ``values`` into live parameters, checking names and shapes."""
    missing = set(params) - set(values)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in params.items():
        v = values[name]
        if v.shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {v.shape} != model shape {p.data.shape}")
        p.data[...] = v
