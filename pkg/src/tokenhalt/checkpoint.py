"""Versioned binary checkpoint container.

Byte layout (everything little-endian):

    offset  size  field
    0       8     magic ``b"TKHCKPT1"``
    8       2     format version (currently 1), uint16
    10      1     precision tag: 4 = float32, 8 = float64, uint8
    11      1     reserved (0)
    12      4     record count, uint32
    16      ...   records

    record:
        uint16  name length, then that many utf-8 bytes
        uint8   ndim, then ndim x uint32 dims
        raw C-order values at the file's precision

Parameter order in the file is the insertion order of the mapping
passed to :func:`save`, which is what makes checkpoints byte-identical
across reruns of a deterministic training job.
"""

import struct

import numpy as np

MAGIC = b"TKHCKPT1"
VERSION = 1

_PREC = {4: np.float32, 8: np.float64}


class CheckpointError(Exception):
    pass


def save(path, params):
    """Write an ordered {name: Tensor-or-ndarray} mapping to disk."""
    items = [(name, np.asarray(getattr(t, "data", t))) for name, t in params.items()]
    if not items:
        raise CheckpointError("checkpoint: nothing to save")
    dtype = items[0][1].dtype
    for name, arr in items:
        if arr.dtype != dtype:
            raise CheckpointError(f"checkpoint: mixed dtypes ({name} is {arr.dtype}, expected {dtype})")
    prec = 4 if dtype == np.float32 else 8
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBBI", VERSION, prec, 0, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=f"<{'f4' if prec == 4 else 'f8'}").tobytes())


def load(path):
    """Read a checkpoint; returns (ordered {name: ndarray}, numpy dtype)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"checkpoint: bad magic in {path}")
    version, prec, _, count = struct.unpack_from("<HBBI", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint: unsupported version {version}")
    if prec not in _PREC:
        raise CheckpointError(f"checkpoint: unknown precision tag {prec}")
    dtype = np.dtype(f"<f{prec}")
    off = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * prec
        out[name] = arr.astype(_PREC[prec])  # copy: frombuffer views are read-only
    if off != len(blob):
        raise CheckpointError(f"checkpoint: {len(blob) - off} trailing bytes in {path}")
    return out, _PREC[prec]
