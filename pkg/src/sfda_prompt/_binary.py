"""Little-endian array records shared by the tensor and model file formats.

A record is ``u32 rank``, ``rank x u32 dims``, then float32 payload in
row-major order.
"""
import struct

import numpy as np

from .errors import DimOverflowError, RejectedInputError, TruncatedFileError

# refuse headers that would describe more than 2**31 floats
MAX_ELEMENTS = 1 << 31
MAX_RANK = 8


def pack_array(arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise RejectedInputError("refusing to write non-finite values")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class Reader:
    """Cursor over a byte buffer that raises typed errors on short reads."""

    def __init__(self, buf, source="<bytes>"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.source}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, what="tensor"):
        (rank,) = self.unpack("<I", f"{what} rank")
        if rank > MAX_RANK:
            raise DimOverflowError(f"{self.source}: {what} rank {rank} exceeds {MAX_RANK}")
        dims = self.unpack(f"<{rank}I", f"{what} dims") if rank else ()
        count = 1
        for d in dims:
            count *= d
            if count > MAX_ELEMENTS:
                raise DimOverflowError(f"{self.source}: {what} dims {dims} overflow the element limit")
        payload = self.take(4 * count, f"{what} payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

    def at_end(self):
        return self.pos == len(self.buf)
