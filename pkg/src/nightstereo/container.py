"""NSLT tensor container: a small binary format holding named dense arrays.

Layout (all integers little-endian)::

    b"NSLT"                      magic
    u16 version                  currently 1
    u16 slot_count
    slot table, per slot:
        u8  name_len, name bytes (utf-8)
        u64 offset               absolute byte offset of the slot's record
    records, per slot:
        u8  rank
        u32 dims[rank]
        u8  dtype                0 = float32, 1 = float64
        raw elements, row-major

Slots are written in the order given and read back in file order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"NSLT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(slots: Mapping[str, np.ndarray]) -> bytes:
    arrays = {}
    for name, arr in slots.items():
        a = np.asarray(arr)
        if a.dtype not in _CODES:
            a = a.astype(np.float64)
        arrays[name] = a

    header = bytearray(MAGIC + struct.pack("<HH", VERSION, len(arrays)))
    table_size = sum(1 + len(n.encode("utf-8")) + 8 for n in arrays)
    offset = len(header) + table_size
    table = bytearray()
    records = bytearray()
    for name, a in arrays.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 255:
            raise FormatError(f"slot name too long: {name!r}")
        table += struct.pack("<B", len(raw_name)) + raw_name + struct.pack("<Q", offset + len(records))
        if a.ndim > 255:
            raise FormatError("rank above 255 is not representable")
        rec = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        code = _CODES[a.dtype]
        rec += struct.pack("<B", code)
        rec += np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        records += rec
    return bytes(header + table + records)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not an NSLT container (bad magic)")
    version, count = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported NSLT version {version}")
    pos = 8
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<B", buf, pos)
            name = buf[pos + 1:pos + 1 + n].decode("utf-8")
            (offset,) = struct.unpack_from("<Q", buf, pos + 1 + n)
            entries.append((name, offset))
            pos += 1 + n + 8
        out = {}
        for name, offset in entries:
            (rank,) = struct.unpack_from("<B", buf, offset)
            dims = struct.unpack_from(f"<{rank}I", buf, offset + 1)
            (code,) = struct.unpack_from("<B", buf, offset + 1 + 4 * rank)
            if code not in _DTYPES:
                raise FormatError(f"slot {name!r}: unknown dtype code {code}")
            dt = _DTYPES[code]
            start = offset + 2 + 4 * rank
            count_el = int(np.prod(dims, dtype=np.int64))
            end = start + count_el * dt.itemsize
            if end > len(buf):
                raise FormatError(f"slot {name!r}: truncated data")
            out[name] = np.frombuffer(buf, dtype=dt, count=count_el, offset=start).reshape(dims).astype(dt.newbyteorder("="))
    except struct.error as exc:
        raise FormatError(f"truncated NSLT container: {exc}") from exc
    return out


def write(path, slots: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(slots))


def read(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
