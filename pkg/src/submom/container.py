"""Self-describing little-endian binary container.

Layout::

    b"SMOM" | u16 version | u16 kind | u32 n_arrays
    per array:
        u16 name_len | name (utf-8) | u8 dtype tag | u8 ndim | u64 shape[ndim]
        | u32 crc32(payload) | payload (C order)
    u32 meta_len | metadata (utf-8 "key=value" lines) | u32 crc32(metadata)

Every payload is checked on read; a mismatch raises ChecksumError and the
partial result is discarded.  Payloads can be memory mapped for large
image stacks.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "Kind",
    "Container",
    "ContainerError",
    "ChecksumError",
    "VersionError",
    "write_container",
    "read_container",
]

MAGIC = b"SMOM"
VERSION = 1
_BLOCK_ROWS = 4096

_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<c8"): 3,
    np.dtype("<c16"): 4,
    np.dtype("<i8"): 5,
}
_DTYPES = {v: k for k, v in _TAGS.items()}


class Kind(IntEnum):
    IMAGE_STACK = 1
    MOMENTS = 2
    RULE = 3
    PARAMS = 4
    VOLUME = 5


class ContainerError(Exception):
    """Malformed or unreadable container."""


class ChecksumError(ContainerError):
    """A payload failed its CRC32 check."""


class VersionError(ContainerError):
    """Unsupported format version."""


@dataclass
class Container:
    kind: Kind
    arrays: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _normalize_dtype(dt) -> np.dtype:
    dt = np.dtype(dt)
    if dt.kind == "f":
        dt = np.dtype("<f4") if dt.itemsize == 4 else np.dtype("<f8")
    elif dt.kind == "c":
        dt = np.dtype("<c8") if dt.itemsize == 8 else np.dtype("<c16")
    elif dt.kind in "iub":
        dt = np.dtype("<i8")
    if dt not in _TAGS:
        raise ContainerError(f"unsupported dtype {dt}")
    return dt


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if not k or "=" in k or "\n" in k or "\n" in v:
            raise ContainerError(f"invalid metadata entry {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def _row_blocks(arr):
    """Yield C-ordered blocks of an array-like that supports row slicing."""
    n = arr.shape[0] if len(arr.shape) else 1
    if len(arr.shape) == 0:
        yield np.asarray(arr)
        return
    for lo in range(0, max(n, 1), _BLOCK_ROWS):
        yield np.asarray(arr[lo:lo + _BLOCK_ROWS])


def write_container(path, kind: Kind, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays (numpy arrays or row-sliceable lazy arrays) and metadata.

    The file is written to a temporary name and renamed on success.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HHI", VERSION, int(kind), len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            shape = tuple(int(s) for s in arr.shape)
            dt = _normalize_dtype(arr.dtype)
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<BB", _TAGS[dt], len(shape)))
            fh.write(struct.pack(f"<{len(shape)}Q", *shape))
            crc_pos = fh.tell()
            fh.write(b"\0\0\0\0")
            crc = 0
            for blk in _row_blocks(arr):
                buf = np.ascontiguousarray(blk, dtype=dt).tobytes()
                crc = zlib.crc32(buf, crc)
                fh.write(buf)
            end = fh.tell()
            fh.seek(crc_pos)
            fh.write(struct.pack("<I", crc))
            fh.seek(end)
        raw = _encode_meta(meta or {})
        fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", zlib.crc32(raw)))
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError("unexpected end of file")
    return buf


def read_container(path, mmap: bool = False, expect: Kind | None = None) -> Container:
    """Read and verify a container.

    With ``mmap`` the payloads are returned as read-only memory maps; the
    checksums are still verified block by block.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        head = _read_exact(fh, 12)
        if head[:4] != MAGIC:
            raise ContainerError(f"{path}: not a container (bad magic)")
        version, kind, n_arrays = struct.unpack("<HHI", head[4:])
        if version != VERSION:
            raise VersionError(f"{path}: format version {version}, expected {VERSION}")
        try:
            kind = Kind(kind)
        except ValueError:
            raise ContainerError(f"{path}: unknown kind {kind}") from None
        if expect is not None and kind != expect:
            raise ContainerError(f"{path}: holds {kind.name}, expected {expect.name}")
        for _ in range(n_arrays):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            if tag not in _DTYPES:
                raise ContainerError(f"{path}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            (crc,) = struct.unpack("<I", _read_exact(fh, 4))
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            offset = fh.tell()
            if mmap and nbytes > 0:
                arr = np.memmap(path, dtype=dt, mode="r", offset=offset, shape=shape)
                got = 0
                flat = arr.reshape(-1)
                step = max(1, (1 << 24) // dt.itemsize)
                for lo in range(0, flat.size, step):
                    got = zlib.crc32(flat[lo:lo + step].tobytes(), got)
                fh.seek(offset + nbytes)
            else:
                buf = _read_exact(fh, nbytes)
                got = zlib.crc32(buf)
                arr = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
            if got != crc:
                raise ChecksumError(f"{path}: checksum mismatch in array {name!r}")
            arrays[name] = arr
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
        raw = _read_exact(fh, mlen)
        (mcrc,) = struct.unpack("<I", _read_exact(fh, 4))
        if zlib.crc32(raw) != mcrc:
            raise ChecksumError(f"{path}: checksum mismatch in metadata")
    return Container(kind, arrays, _decode_meta(raw), version)
