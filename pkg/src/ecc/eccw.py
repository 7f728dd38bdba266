"""Binary weight files.

Layout, all little-endian, no padding anywhere:

    bytes 0..3   magic "ECCW"
    u32          format version (currently 1)
    u32          entry count
    per entry:
        u16      name length in bytes
        ...      name, UTF-8
        u8       rank
        u32 * rank   dimensions
        f32 * prod(dims)   values, C order

Entries are written sorted by name so identical weights always produce
identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ECCW"
VERSION = 1


class WeightFormatError(ValueError):
    """Raised when a weight file violates the format."""


def save_weights(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"name too long: '{name[:40]}...'")
        if arr.ndim > 255:
            raise WeightFormatError(f"rank {arr.ndim} of '{name}' exceeds 255")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise WeightFormatError(
            f"bad magic {buf[:4]!r}, expected {MAGIC!r}"
        )
    if len(buf) < 12:
        raise WeightFormatError("truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise WeightFormatError(f"truncated file while reading {what}")

    for i in range(count):
        need(2, f"name length of entry {i}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen, f"name of entry {i}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError(f"entry {i} name is not UTF-8") from e
        pos += nlen
        need(1, f"rank of '{name}'")
        rank = buf[pos]
        pos += 1
        need(4 * rank, f"dimensions of '{name}'")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = 1
        for d in dims:
            size *= d
        need(4 * size, f"values of '{name}'")
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        if name in out:
            raise WeightFormatError(f"duplicate entry '{name}'")
        out[name] = arr.copy()
    if pos != len(buf):
        raise WeightFormatError(
            f"{len(buf) - pos} trailing bytes after last entry"
        )
    return out
