"""Binary tensor file format (".ten").

Layout: magic "ACNNTEN1" (8 bytes), u32 little-endian rank, `rank` u32
little-endian extents, then row-major 32-bit little-endian floats. Used for
network parameters, volumes, label maps (as floats) and latent codes.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACNNTEN1"


class TenFormatError(ValueError):
    pass


def write_ten(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_ten(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise TenFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank > 32:
            raise TenFormatError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise TenFormatError(
                f"{path}: truncated payload ({len(payload)} bytes, wanted {4 * count})"
            )
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return data.reshape(shape)
