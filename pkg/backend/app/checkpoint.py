"""
Flat binary format for parameter collections.

Layout (little-endian):
    b"AIRT" | version u32
    repeated until EOF:
        name length u32 | name bytes (utf-8) | rank u32 | extents u32 * rank | f64 payload
"""

import os
import struct
from typing import Dict

import numpy as np

MAGIC = b"AIRT"
VERSION = 1


class CheckpointMismatch(ValueError):
    """Raised when a checkpoint cannot be read or does not fit the model."""


def save_parameters(path: str, arrays: Dict[str, np.ndarray]) -> None:
    """
    Write named arrays to `path` atomically (temp file + rename).

    Args:
        path: destination file
        arrays: name -> array; names are written in sorted order
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", VERSION))
        for name in sorted(arrays):
            value = np.ascontiguousarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", value.ndim))
            handle.write(struct.pack(f"<{value.ndim}I", *value.shape))
            handle.write(value.tobytes())
    os.replace(tmp_path, path)


def load_parameters(path: str) -> Dict[str, np.ndarray]:
    """
    Read every array stored in an AIRT file.

    Raises:
        CheckpointMismatch: on a missing file, bad magic, unsupported version or truncation
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except FileNotFoundError as exc:
        raise CheckpointMismatch(f"{path}: no such checkpoint") from exc

    if blob[:4] != MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic {blob[:4]!r} at offset 0")
    if len(blob) < 8:
        raise CheckpointMismatch(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")

    arrays: Dict[str, np.ndarray] = {}
    offset = 8
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointMismatch(
                    f"{path}: payload of '{name}' needs {8 * count} bytes at offset {offset}, "
                    f"only {len(blob) - offset} left"
                )
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset = end
    except struct.error as exc:
        raise CheckpointMismatch(f"{path}: truncated record at offset {offset}") from exc
    return arrays
