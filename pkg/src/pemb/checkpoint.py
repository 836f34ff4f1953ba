"""Binary checkpoint of named f32 tensors.

Layout, all integers little-endian::

    b"PEMB" | u32 version | 8-byte config hash | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values (row-major)
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (CheckpointError, ConfigHashMismatchError, CorruptHeaderError,
                     DimMismatchError, TruncatedCheckpointError)

__all__ = ["MAGIC", "VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint", "encode", "decode"]

MAGIC = b"PEMB"
VERSION = 1
_HEADER = struct.Struct("<4sI8sI")


@dataclass
class Checkpoint:
    config_hash: bytes
    tensors: dict[str, np.ndarray]
    version: int = VERSION


def encode(tensors: Mapping[str, np.ndarray], config_hash: bytes) -> bytes:
    if len(config_hash) != 8:
        raise CheckpointError(f"config hash must be 8 bytes, got {len(config_hash)}")
    parts = [_HEADER.pack(MAGIC, VERSION, config_hash, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has rank {a.ndim}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected_shapes: Mapping[str, tuple[int, ...]] | None = None,
           expected_hash: bytes | None = None) -> Checkpoint:
    """Parse and validate; nothing is returned unless the whole file is sound.

    Shapes are compared before the hash so a dimension mismatch names the
    offending tensor.
    """
    if len(buf) < _HEADER.size:
        if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
            raise CorruptHeaderError("bad magic")
        raise TruncatedCheckpointError("file shorter than the header")
    magic, version, chash, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeaderError(f"unsupported format version {version}")
    r = _Reader(buf)
    r.pos = _HEADER.size
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = bytes(r.take(n, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptHeaderError(f"tensor {i} name is not UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * size, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptHeaderError(f"{len(buf) - r.pos} trailing bytes after the tensor table")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise DimMismatchError(f"checkpoint has no tensor {name}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise DimMismatchError(
                    f"tensor {name}: checkpoint shape {tensors[name].shape}, expected {tuple(shape)}")
    if expected_hash is not None and chash != expected_hash:
        raise ConfigHashMismatchError(f"config hash {chash.hex()} != expected {expected_hash.hex()}")
    return Checkpoint(chash, tensors, version)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], config_hash: bytes) -> None:
    """Write-temp-then-rename, so readers never see a partial file."""
    path = Path(path)
    blob = encode(tensors, config_hash)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expected_shapes=None, expected_hash: bytes | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, expected_shapes, expected_hash)
