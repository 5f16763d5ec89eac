"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"SKSP" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | prod(dims) x f64 )

A plain-text index ``<path>.index`` lists ``name<TAB>shape<TAB>byte_offset`` per
record and one ``meta`` line carrying a JSON object.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SKSP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: dict[str, np.ndarray]) -> tuple[bytes, list[tuple[str, tuple, int]]]:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    offset = sum(len(c) for c in chunks)
    index = []
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        index.append((name, arr.shape, offset))
        chunks += [head, arr.tobytes()]
        offset += len(head) + arr.nbytes
    return b"".join(chunks), index


def decode(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(payload):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    payload, index = encode(arrays)
    lines = ["# skelsplat checkpoint index v1", "meta\t" + json.dumps(meta or {}, sort_keys=True)]
    for name, shape, offset in index:
        lines.append(f"{name}\t{','.join(map(str, shape))}\t{offset}")
    atomic_write_bytes(path, payload)
    atomic_write_text(Path(str(path) + ".index"), "\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    arrays = decode(path.read_bytes())
    meta: dict = {}
    index_path = Path(str(path) + ".index")
    if index_path.exists():
        for line in index_path.read_text().splitlines():
            if line.startswith("meta\t"):
                meta = json.loads(line[5:])
    return arrays, meta
