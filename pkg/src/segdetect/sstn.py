"""SSTN1 binary tensor container.

Layout: the 5-byte magic ``SSTN1``, the rank as little-endian u32, one u32 per
extent, then the values as little-endian f64 in row-major order.
"""
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SSTN1"


def dumps(array):
    arr = np.asarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(blob, source="<bytes>"):
    if len(blob) < 9 or blob[:5] != MAGIC:
        raise FormatError(f"{source}: bad magic, not an SSTN1 container")
    (rank,) = struct.unpack_from("<I", blob, 5)
    offset = 9 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated header (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, 9)
    count = int(np.prod(shape, dtype=np.int64))
    expected = offset + 8 * count
    if len(blob) != expected:
        raise FormatError(f"{source}: payload has {len(blob) - offset} bytes, "
                          f"expected {8 * count} for shape {tuple(shape)}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(np.float64)


def save(path, array):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(array))
    os.replace(tmp, path)


def load(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise FormatError(f"missing tensor file {path}") from exc
    return loads(blob, source=path)
