"""Binary array container shared by checkpoints (``SWM1``) and episode logs (``SWE1``).

Layout, all integers little-endian::

    magic        4 bytes
    version      u32 (currently 1)
    digest_len   u32, then digest_len bytes of UTF-8 (config digest, may be empty)
    n_records    u32
    per record:
        n_arrays u32
        per array:
            name_len u32, name (UTF-8)
            rank     u32
            dims     rank x u64
            payload  prod(dims) x f64
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from pathlib import Path

import numpy as np

from spikewm.errors import FormatError

VERSION = 1
CHECKPOINT_MAGIC = b"SWM1"
EPISODE_MAGIC = b"SWE1"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def encode(magic: bytes, records: list[dict[str, np.ndarray]], digest: str = "") -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be four bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(_U32.pack(VERSION))
    d = digest.encode()
    buf.write(_U32.pack(len(d)))
    buf.write(d)
    buf.write(_U32.pack(len(records)))
    for rec in records:
        buf.write(_U32.pack(len(rec)))
        for name, arr in rec.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            buf.write(_U32.pack(len(nb)))
            buf.write(nb)
            buf.write(_U32.pack(arr.ndim))
            for n in arr.shape:
                buf.write(_U64.pack(n))
            buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"truncated {what}", self.off)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode(data: bytes, magic: bytes) -> tuple[list[dict[str, np.ndarray]], str]:
    r = _Reader(data)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    digest = r.take(r.u32("digest length"), "digest").decode()
    records = []
    for _ in range(r.u32("record count")):
        rec = {}
        for _ in range(r.u32("array count")):
            start = r.off
            try:
                name = r.take(r.u32("name length"), "name").decode()
            except UnicodeDecodeError:
                raise FormatError("array name is not UTF-8", start) from None
            rank = r.u32("rank")
            if rank > 8:
                raise FormatError(f"implausible rank {rank}", r.off - 4)
            dims = tuple(r.u64("dims") for _ in range(rank))
            count = math.prod(dims)
            payload = r.take(8 * count, f"payload of {name!r}")
            rec[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        records.append(rec)
    if r.off != len(data):
        raise FormatError("trailing bytes", r.off)
    return records, digest


def write_container(path, magic: bytes, records: list[dict[str, np.ndarray]], digest: str = ""):
    Path(path).write_bytes(encode(magic, records, digest))


def read_container(path, magic: bytes) -> tuple[list[dict[str, np.ndarray]], str]:
    return decode(Path(path).read_bytes(), magic)
