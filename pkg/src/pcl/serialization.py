"""Binary containers shared by checkpoints, prototype dumps and centroid files.

All tensors are little-endian float64 (or int64 for label/count arrays),
written row-major with no padding.
"""
import os
import struct
import tempfile

import numpy as np

TENSOR_MAGIC = b"PCLT1"


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` via a temp file in the same directory plus rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def pack_i64(arr):
    return np.ascontiguousarray(arr, dtype="<i8").tobytes()


class Reader:
    """Sequential cursor over a bytes buffer with truncation checks."""

    def __init__(self, data, what="file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, nbytes):
        end = self.pos + nbytes
        if end > len(self.data):
            raise ValueError(f"truncated {self.what}: wanted {nbytes} bytes at offset {self.pos}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def f64(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def i64(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<i8").astype(np.int64).reshape(shape)

    def at_end(self):
        return self.pos == len(self.data)


def tensor_bytes(matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return TENSOR_MAGIC + struct.pack("<QQ", *matrix.shape) + pack_f64(matrix)


def write_tensor_file(path, matrix):
    atomic_write_bytes(path, tensor_bytes(matrix))


def read_tensor_file(path):
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), "tensor file")
    if rd.take(5) != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    rows, cols = rd.unpack("<QQ")
    return rd.f64((rows, cols))
