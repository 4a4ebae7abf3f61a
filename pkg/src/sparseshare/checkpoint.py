"""Binary container for checkpoints and dataset exports.

Layout (all integers little-endian):

    magic b"GSPR" | u32 version | u32 digest_len | digest bytes
    | u32 n_sections | sections...

    section: u32 n_records | records...
    record:  u32 name_len | name utf-8 | u8 dtype {0=f32, 1=f64}
             | u32 rank | u32 x rank dims | raw little-endian data

A checkpoint is a container with three sections: model parameters,
optimizer state, and the uncertainty eta vector.  Loading parses the whole
file before exposing anything, so a truncated or corrupt file never yields
partial state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSPR"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Malformed container: bad magic, unknown version, or truncation."""


Records = list[tuple[str, np.ndarray]]


def write_container(path: str | Path, digest: bytes, sections: list[Records]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<I", len(digest)), digest,
              struct.pack("<I", len(sections))]
    for records in sections:
        chunks.append(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.ascontiguousarray(arr)
            try:
                tag = _DTYPE_TAGS[arr.dtype]
            except KeyError:
                raise ValueError(f"record {name!r}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", tag))
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype(_TAG_DTYPES[tag], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated container: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_container(path: str | Path) -> tuple[bytes, list[Records]]:
    """Returns (digest, sections); raises CheckpointError on any defect."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    digest = r.take(r.u32())
    sections = []
    for _ in range(r.u32()):
        records: Records = []
        for _ in range(r.u32()):
            name = r.take(r.u32()).decode("utf-8")
            tag = r.u8()
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
            rank = r.u32()
            dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
            records.append((name, data.reshape(dims).copy()))
        sections.append(records)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes in {path}")
    return digest, sections
