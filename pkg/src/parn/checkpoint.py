"""Binary checkpoint files.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic  b"PARNCKPT"
    8       4     format version (u32) == 1
    12      32    sha256 digest of the canonical model-config text
    44      4     record count (u32)
    48      ...   records

Each record: name length (u32), name (UTF-8), rank (u32), dims (u32 each),
payload (float32, row-major). Records are written in sorted name order, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PARNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    code = "checkpoint_error"


class CheckpointMagicError(CheckpointError):
    code = "bad_magic"


class CheckpointVersionError(CheckpointError):
    code = "bad_version"


class CheckpointDigestError(CheckpointError):
    code = "config_mismatch"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


def config_digest(config_text: str) -> bytes:
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_text: str):
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += config_digest(config_text)
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint(path, config_text: str | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; verifies magic, version, and (when given) that the
    stored digest matches ``config_text``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} "
                f"(need {n} bytes at offset {pos}, file has {len(data)})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise CheckpointMagicError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {VERSION}")
    digest = take(32, "config digest")
    if config_text is not None and digest != config_digest(config_text):
        raise CheckpointDigestError(
            "checkpoint was written for a different model configuration")
    count = struct.unpack("<I", take(4, "record count"))[0]
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        rank = struct.unpack("<I", take(4, "rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = take(4 * n, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointTruncatedError(
            f"{len(data) - pos} trailing bytes after the last record")
    return arrays
