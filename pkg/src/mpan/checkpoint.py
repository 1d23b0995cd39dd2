"""Binary checkpoint container.

Layout: magic bytes ``MPAN1``, a little-endian u64 entry count, then per
entry: u32 name length, utf-8 name, one dtype byte, one rank byte, rank
u64 extents, and the raw little-endian payload. Floats round-trip bitwise.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import IntegrityError

MAGIC = b"MPAN1"

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i8"}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1,
             np.dtype("uint8"): 2, np.dtype("int64"): 3}


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _CODE_FOR:
                raise IntegrityError(f"cannot serialize entry '{name}' with dtype {arr.dtype}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(_DTYPE_CODES[_CODE_FOR[arr.dtype]], copy=False).tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, context: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IntegrityError(f"checkpoint truncated while reading {context}")
    return buf


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read all entries; a corrupt file raises before anything is returned."""
    if not os.path.exists(path):
        raise IntegrityError(f"checkpoint file not found: {path}")
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise IntegrityError(
                f"not a checkpoint: expected format tag {MAGIC!r}, found {magic!r}")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "entry count"))
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"entry {i} name length"))
            name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"'{name}' header"))
            if code not in _DTYPE_CODES:
                raise IntegrityError(f"entry '{name}' has unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"'{name}' shape"))
            dtype = np.dtype(_DTYPE_CODES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = _read_exact(fh, nbytes, f"'{name}' payload")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise IntegrityError("checkpoint has trailing bytes after the last entry")
    return arrays
