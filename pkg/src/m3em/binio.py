"""Little-endian binary I/O helpers shared by the checkpoint and feature formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(Exception):
    """Base class for malformed binary files."""


class MagicMismatchError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was complete."""


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def check_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise MagicMismatchError(f"bad magic: expected {magic!r}, got {got!r}")


def check_version(fh: BinaryIO, supported: int) -> None:
    version = read_u32(fh, "format version")
    if version != supported:
        raise VersionMismatchError(f"unsupported format version {version}, expected {supported}")


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def write_u8(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<B", value))


def read_u8(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<B", read_exact(fh, 1, what))[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO, what: str) -> str:
    length = read_u32(fh, f"{what} length")
    return read_exact(fh, length, what).decode("utf-8")


def write_f64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64_array(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = read_exact(fh, count * 8, what)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).copy()


def write_u32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def read_u32_array(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = read_exact(fh, count * 4, what)
    return np.frombuffer(raw, dtype="<u4").astype(np.int64).copy()
