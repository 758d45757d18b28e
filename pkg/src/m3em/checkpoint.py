"""Model checkpoint format.

Layout (little-endian): magic ``M3EM``, u32 format version, then one record
per parameter until end of file: u32 name length, utf-8 name, u32 rank,
u32 dims, f64 data.  Loading validates every name and shape against the
freshly constructed parameter set, so a checkpoint can only be restored into
a matching configuration.
"""

from __future__ import annotations

import os

from .binio import (
    FormatError,
    TruncatedFileError,
    check_magic,
    check_version,
    read_f64_array,
    read_str,
    read_u32,
    read_u32_array,
    write_f64_array,
    write_str,
    write_u32,
    write_u32_array,
)
from .model import M3emParams

MAGIC = b"M3EM"
VERSION = 1


def save_params(path: str | os.PathLike, params: M3emParams) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        write_u32(fh, VERSION)
        for name, tensor in params.named().items():
            write_str(fh, name)
            dims = tensor.shape
            write_u32(fh, len(dims))
            write_u32_array(fh, list(dims))
            write_f64_array(fh, tensor.data)


def load_params(path: str | os.PathLike, template: M3emParams) -> M3emParams:
    """Fill ``template``'s tensors from a checkpoint, validating every shape."""
    expected = template.named()
    seen: set[str] = set()
    with open(path, "rb") as fh:
        check_magic(fh, MAGIC)
        check_version(fh, VERSION)
        while True:
            probe = fh.read(1)
            if probe == b"":
                break
            fh.seek(-1, os.SEEK_CUR)
            name = read_str(fh, "parameter name")
            rank = read_u32(fh, f"rank of {name}")
            dims = tuple(int(d) for d in read_u32_array(fh, rank, f"dims of {name}"))
            count = 1
            for d in dims:
                count *= d
            data = read_f64_array(fh, count, f"data of {name}")
            if name not in expected:
                raise FormatError(f"checkpoint holds unknown parameter {name!r}")
            if name in seen:
                raise FormatError(f"checkpoint holds duplicate parameter {name!r}")
            target = expected[name]
            if dims != target.shape:
                raise FormatError(
                    f"shape mismatch for {name!r}: checkpoint {dims}, config {target.shape}")
            target.data = data.reshape(dims)
            seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise TruncatedFileError(f"checkpoint is missing parameters: {', '.join(missing)}")
    return template
