"""AZWT named-tensor checkpoints.

Layout (little-endian): ``b"AZWT"``, u32 version (1), u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], and the
float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"AZWT"
VERSION = 1


class WeightFormatError(ValueError):
    """The file is not a well-formed AZWT checkpoint."""


def encode(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightFormatError("bad magic; not an AZWT file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError("tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise WeightFormatError(f"{len(buf) - pos} trailing bytes")
    return state


def save_weights(net, path: Union[str, Path]) -> None:
    """Write every parameter and running statistic of ``net``."""
    Path(path).write_bytes(encode(net.state_dict()))


def read_weights(path: Union[str, Path]) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_weights(net, path: Union[str, Path]) -> None:
    """Load a checkpoint into ``net``; raises ManifestMismatch on name/shape drift."""
    net.load_state_dict(read_weights(path))
