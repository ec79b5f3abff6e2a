"""Binary tensor files and weight checkpoints.

Tensor record (``.smrf``), little-endian::

    b"SMRF" | version u16 | dtype u8 (0=f32, 1=f64) | ndim u8 | dims u64 * ndim | payload

Checkpoint (``.ckpt``)::

    b"SMRFPACK" | version u16 | manifest length u64 | manifest JSON (UTF-8) | tensor records

The manifest holds ``{"config": ..., "tensors": [{"name", "offset", "nbytes"}]}``
with offsets relative to the first byte after the manifest.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SMRF"
PACK_MAGIC = b"SMRFPACK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class SmrfFormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise SmrfFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise SmrfFormatError("bad magic; not an SMRF tensor")
    try:
        version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    except struct.error as exc:
        raise SmrfFormatError("truncated header") from exc
    if version != VERSION:
        raise SmrfFormatError(f"unsupported SMRF version {version}")
    if code not in _DTYPES:
        raise SmrfFormatError(f"unknown dtype code {code}")
    pos = offset + 8
    try:
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    except struct.error as exc:
        raise SmrfFormatError("truncated dims") from exc
    pos += 8 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise SmrfFormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise SmrfFormatError(f"{path}: trailing bytes after tensor")
    return arr


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config: Mapping) -> None:
    body = io.BytesIO()
    index = []
    for name, arr in tensors.items():
        rec = encode_tensor(arr)
        index.append({"name": name, "offset": body.tell(), "nbytes": len(rec)})
        body.write(rec)
    manifest = json.dumps({"config": config, "tensors": index}, sort_keys=True).encode("utf-8")
    head = PACK_MAGIC + struct.pack("<HQ", VERSION, len(manifest))
    atomic_write_bytes(path, head + manifest + body.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != PACK_MAGIC:
        raise SmrfFormatError(f"{path}: not an SMRF checkpoint")
    version, mlen = struct.unpack_from("<HQ", buf, 8)
    if version != VERSION:
        raise SmrfFormatError(f"{path}: unsupported checkpoint version {version}")
    start = 18
    manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    base = start + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        arr, end = decode_tensor(buf, base + entry["offset"])
        if end - (base + entry["offset"]) != entry["nbytes"]:
            raise SmrfFormatError(f"{path}: size mismatch for tensor {entry['name']}")
        tensors[entry["name"]] = arr
    return tensors, manifest["config"]
