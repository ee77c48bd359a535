"""Binary checkpoints shared by the segmentation network and the translator.

Layout (all integers little-endian)::

    b"GMCKPT\\0\\0"            8-byte magic
    uint32 version             currently 1
    uint32 n; n bytes          UTF-8 JSON config block {"kind": ..., "config": {...}}
    uint32 count               number of parameter records
    per record:
        uint32 n; n bytes      UTF-8 parameter name
        uint32 rank
        rank x uint64          dims
        float64 values         row-major, little-endian

Records are written in sorted name order so identical models give identical
bytes. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FormatError, atomic_write_bytes

MAGIC = b"GMCKPT\0\0"
VERSION = 1


def encode_checkpoint(kind: str, config: Mapping, params: Mapping[str, np.ndarray]) -> bytes:
    block = json.dumps({"kind": kind, "config": dict(config)}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(block)), block, struct.pack("<I", len(params))]
    for name in sorted(params):
        a = np.array(params[name], dtype="<f8", order="C")  # keeps rank 0
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.off, self.path)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes, path=None) -> tuple[str, dict, dict[str, np.ndarray]]:
    r = _Reader(buf, path)
    if r.take(8, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0, path)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8, path)
    n = r.u32("config length")
    start = r.off
    try:
        block = json.loads(r.take(n, "config block").decode("utf-8"))
        kind, config = block["kind"], block["config"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed config block: {exc}", start, path) from None
    params = {}
    for _ in range(r.u32("record count")):
        name_off = r.off
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", name_off, path) from None
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(8 * count, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.off != len(buf):
        raise FormatError("trailing bytes after last record", r.off, path)
    return kind, config, params


def save_checkpoint(path, kind: str, config: Mapping, params: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(kind, config, params))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes(), path)
