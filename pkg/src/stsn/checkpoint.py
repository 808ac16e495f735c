"""Binary checkpoints: model config plus named float64 tensors, CRC32-sealed.

Layout (little-endian)::

    b"STCK"  u16 version  u32 config_len  config (UTF-8 JSON)
    u32 record_count
    per record: u16 name_len, name, u16 rank, u32 dims[rank], f64 data
    u32 CRC32 of every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "dumps", "loads", "VERSION"]

MAGIC = b"STCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(config, params):
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<H", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def loads(data):
    """Parse checkpoint bytes -> ``(ModelConfig, {name: float64 array})``."""
    if len(data) < 4 + 6 + 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.raw(4)
    version, cfg_len = r.take("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    try:
        config = ModelConfig.from_dict(json.loads(r.raw(cfg_len).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from exc
    (count,) = r.take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode()
        (rank,) = r.take("<H")
        dims = r.take(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.raw(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, params


def save_checkpoint(path, config, params):
    Path(path).write_bytes(dumps(config, params))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
