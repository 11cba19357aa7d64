"""Binary checkpoint format.

Layout (little-endian)::

    b"CCKPT1"
    u32 config_len, config text (UTF-8 key = value lines)
    u32 param_count
    per parameter:
        u32 name_len, name (UTF-8)
        u8  group (0=enc, 1=dec, 2=pz)
        u8  rank, rank x u32 dims
        float32 payload (row-major)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import GROUPS, Parameter

MAGIC = b"CCKPT1"


class CheckpointError(ValueError):
    pass


def serialize_params(params: Iterable[Parameter], config_text: str = "") -> bytes:
    params = list(params)
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", GROUPS.index(p.group), p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_params(blob: bytes) -> tuple[str, list[tuple[str, str, np.ndarray]]]:
    """Return (config_text, [(name, group, float32 array), ...])."""
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = take(cfg_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        gidx, rank = struct.unpack("<BB", take(2))
        if gidx >= len(GROUPS):
            raise CheckpointError(f"bad group byte {gidx} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        entries.append((name, GROUPS[gidx], arr))
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes in checkpoint")
    return config_text, entries


def save_checkpoint(path, params: Iterable[Parameter], config_text: str = "") -> None:
    Path(path).write_bytes(serialize_params(params, config_text))


def load_checkpoint(path) -> tuple[str, list[tuple[str, str, np.ndarray]]]:
    return deserialize_params(Path(path).read_bytes())
