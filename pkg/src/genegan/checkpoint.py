"""GGCK checkpoint files.

Layout (all integers little-endian)::

    b"GGCK"  u32 version (=1)
    u32 config length, UTF-8 JSON config block (sorted keys)
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 dtype tag (0 float32, 1 float64),
        u8 rank, rank x u64 dims, raw little-endian payload
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GGCK"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionMismatchError(CheckpointError):
    code = 12


class CrcMismatchError(CheckpointError):
    code = 13


class TruncatedCheckpointError(CheckpointError):
    code = 14


def encode(meta: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.limit = limit
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.limit:
            raise TruncatedCheckpointError(f"file ends inside {what} (byte {self.pos}, need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}; not a GGCK checkpoint")
    if len(data) < 12:
        raise TruncatedCheckpointError("file ends inside the header")
    r = _Reader(data, len(data) - 4)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}")
    (clen,) = r.unpack("<I", "config length")
    try:
        meta = json.loads(r.take(clen, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        _verify_crc(data)
        raise CheckpointError(f"config block is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        label = f"tensor #{i}"
        (nlen,) = r.unpack("<H", f"{label} name length")
        name = r.take(nlen, f"{label} name").decode("utf-8", errors="replace")
        label = f"tensor {name!r}"
        tag, rank = r.unpack("<BB", f"{label} header")
        if tag not in TAG_DTYPES:
            _verify_crc(data)
            raise CheckpointError(f"{label}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q", f"{label} dims") if rank else ()
        dt = TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dt.itemsize
        payload = r.take(nbytes, f"{label} payload")
        tensors.append((name, np.frombuffer(payload, dtype=dt).reshape(dims).copy()))
    if r.pos != r.limit:
        _verify_crc(data)
        raise CheckpointError(f"{r.limit - r.pos} unexpected bytes after tensor table")
    _verify_crc(data)
    return meta, tensors


def _verify_crc(data: bytes) -> None:
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise CrcMismatchError(f"CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")


def write(path, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    tmp.replace(path)


def read(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)
