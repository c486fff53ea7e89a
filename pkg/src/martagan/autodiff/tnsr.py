"""Single-tensor debug dumps.

Layout: 16-byte header (magic b"TNSR", u32 rank, four u16 dims — unused
trailing dims are 1) followed by the float32 payload, everything
little-endian, C order. Rank is capped at 4 by the header.
"""

import struct

import numpy as np

from ..ioutil import atomic_open

MAGIC = b"TNSR"
_HEADER = struct.Struct("<4sI4H")


def save_tnsr(path, array):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim > 4:
        raise ValueError(f"tnsr supports rank <= 4, got rank {arr.ndim}")
    if any(d > 0xFFFF for d in arr.shape):
        raise ValueError(f"tnsr dims must fit in u16, got shape {arr.shape}")
    dims = list(arr.shape) + [1] * (4 - arr.ndim)
    with atomic_open(path) as fh:
        fh.write(_HEADER.pack(MAGIC, arr.ndim, *dims))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_tnsr(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError(f"{path}: truncated tnsr header")
        magic, rank, *dims = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if rank > 4:
            raise ValueError(f"{path}: unsupported rank {rank}")
        shape = tuple(dims[:rank]) if rank else ()
        count = 1
        for d in shape:
            count *= d
        payload = fh.read(4 * count)
        if len(payload) < 4 * count:
            raise ValueError(f"{path}: truncated tnsr payload, wanted {4 * count} bytes")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
