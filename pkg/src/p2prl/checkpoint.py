"""Binary checkpoint container for named arrays.

Layout, all little-endian: magic "PRIPG1", version u16, entry count u32,
then per entry a u16 name length, the UTF-8 name, a u8 rank, one u32 per
dimension, and the array body as 32-bit floats.  Metadata rides along as
ordinary entries under a "meta/" name prefix, so the reader needs exactly
one code path.

Arrays come back as float32; packing wider inputs truncates them, which
keeps re-runs byte-identical but is not an exact round trip for 64-bit
training state.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PRIPG1"
VERSION = 1

_META_PREFIX = "meta/"


class CorruptCheckpointError(RuntimeError):
    """Container failed to parse; `offset` is where reading stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def pack(entries: dict) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HI", VERSION, len(entries))
    for name, value in entries.items():
        raw = name.encode()
        if not 0 < len(raw) <= 0xFFFF:
            raise ValueError(f"entry name {name!r} not encodable")
        arr = np.asarray(value, dtype="<f4")
        if arr.ndim:  # ascontiguousarray would flatten rank-0 to rank-1
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 0xFF:
            raise ValueError("rank too large")
        if any(d > 0xFFFFFFFF for d in arr.shape):
            raise ValueError("dimension too large")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.tobytes()
    return bytes(out)


def _need(data: bytes, offset: int, count: int) -> None:
    if offset + count > len(data):
        raise CorruptCheckpointError("container truncated", offset)


def unpack(data: bytes) -> dict:
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic", 0)
    offset = len(MAGIC)
    _need(data, offset, 6)
    version, count = struct.unpack_from("<HI", data, offset)
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}", offset)
    offset += 6
    entries = {}
    for _ in range(count):
        _need(data, offset, 2)
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        _need(data, offset, name_len)
        try:
            name = data[offset: offset + name_len].decode()
        except UnicodeDecodeError as err:
            raise CorruptCheckpointError("entry name not UTF-8", offset) from err
        offset += name_len
        _need(data, offset, 1)
        rank = data[offset]
        offset += 1
        dims = []
        for _ in range(rank):
            _need(data, offset, 4)
            dims.append(struct.unpack_from("<I", data, offset)[0])
            offset += 4
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))  # rank 0 -> one value
        _need(data, offset, n_bytes)
        arr = np.frombuffer(data, dtype="<f4", count=n_bytes // 4,
                            offset=offset).reshape(dims)
        entries[name] = arr.copy()
        offset += n_bytes
    if offset != len(data):
        raise CorruptCheckpointError("trailing bytes after last entry", offset)
    return entries


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    merged = dict(params)
    for key, value in (meta or {}).items():
        merged[_META_PREFIX + key] = np.asarray(value)
    with open(path, "wb") as fh:
        fh.write(pack(merged))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        entries = unpack(fh.read())
    params, meta = {}, {}
    for name, value in entries.items():
        if name.startswith(_META_PREFIX):
            meta[name[len(_META_PREFIX):]] = value
        else:
            params[name] = value
    return params, meta
