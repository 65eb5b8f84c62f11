"""VDTN binary tensor files and the checkpoint layout built on them.

Layout: ``b"VDTN"``, version byte (1), dtype byte (0 = float32), rank byte,
a zero pad byte, ``rank`` little-endian u64 extents, then the row-major
little-endian float32 payload.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"VDTN"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        raise FormatError(f"VDTN stores float32 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank above 255 is not representable")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim, 0])
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + extents + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads(buf: bytes) -> np.ndarray:
    return read(io.BytesIO(buf))


def read(fh: BinaryIO | str | os.PathLike) -> np.ndarray:
    if not hasattr(fh, "read"):
        with open(fh, "rb") as f:
            return read(f)
    head = fh.read(8)
    if len(head) != 8 or head[:4] != MAGIC:
        raise FormatError("missing VDTN magic")
    version, dtype, rank, pad = head[4], head[5], head[6], head[7]
    if version != VERSION:
        raise FormatError(f"unsupported VDTN version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported VDTN dtype code {dtype}")
    if pad != 0:
        raise FormatError("reserved header byte must be zero")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def write(path: str | os.PathLike, array) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def save_checkpoint(directory: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write one ``.vdtn`` file per tensor plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"tensors": {}, "meta": meta or {}}
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".vdtn"
        arr = np.asarray(tensors[name], dtype=np.float32)
        write(directory / fname, arr)
        index["tensors"][name] = {"file": fname, "dims": list(arr.shape)}
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    index = json.loads(index_path.read_text())
    tensors = {name: read(directory / entry["file"]) for name, entry in index["tensors"].items()}
    return tensors, index.get("meta", {})
