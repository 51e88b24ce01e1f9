"""Binary checkpoint format.

    b"NSPR" | u32 version | u32 header length | JSON header
    | u32 tensor count | tensors | u32 CRC32 of everything before it

Each tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims, then row-major
little-endian float64 values. The JSON header carries the model config, the
optimizer's scalar state, and training progress.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NSPR"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupted file)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(header, tensors))
    tmp.replace(path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def check_config(saved: dict, expected: dict) -> None:
    diff = sorted(k for k in set(saved) | set(expected) if saved.get(k) != expected.get(k))
    if diff:
        detail = ", ".join(f"{k}: {saved.get(k)!r} != {expected.get(k)!r}" for k in diff)
        raise ConfigMismatch(f"checkpoint config mismatch ({detail})")
