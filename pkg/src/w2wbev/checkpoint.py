"""Binary checkpoint format.

Layout, all little-endian regardless of host:

    magic   4 bytes  b"W2WB"
    version u32
    count   u32                      number of tensors
    per tensor:
        name_len u32, name utf-8 bytes
        dtype    u8                  0 = float32, 1 = float64
        rank     u32, dims u32 * rank
        payload  raw little-endian values
    checksum u64                     first 8 bytes of SHA-256 over all
                                     preceding bytes, little-endian

Round-trips are bit-exact and the checksum is verified on load.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"W2WB"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint file."""


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        code = _CODE_FOR[arr.dtype]
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BI", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _checksum(body)))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if stored != _checksum(body):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BI", body, offset)
        offset += 5
        dims = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        n = int(np.prod(dims)) if rank else 1
        payload = body[offset:offset + n * dtype.itemsize]
        offset += n * dtype.itemsize
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return arrays
