"""Binary model checkpoints.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"ADVB"
    4       2     format version (u16), currently 1
    6       4     config length L (u32)
    10      L     model config, canonical JSON (sorted keys, utf-8)
    ...           entries, each:
                      u16  name length
                      ...  name (utf-8)
                      u8   dtype tag (0 = float32, 1 = float64)
                      u8   rank
                      u32  dim, repeated rank times
                      ...  payload, little-endian floats
    end-4   4     crc32 (u32) over every preceding byte

Entries cover parameters and batch-norm running statistics, in the
model's deterministic naming order.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import IntegrityError
from .nn import ModelConfig, Module, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "file_digest"]

MAGIC = b"ADVB"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _entries(model: Module):
    yield from model.named_parameters()
    yield from ((name, buf) for name, buf in model.named_buffers())


def save_checkpoint(model: Module, path) -> Path:
    path = Path(path)
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(config_blob))
    out += config_blob
    for name, value in _entries(model):
        arr = value.data if isinstance(value, Tensor) else value
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise ValueError(f"cannot checkpoint {name}: unsupported dtype {arr.dtype}")
        encoded = name.encode()
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise IntegrityError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos})"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, config: ModelConfig | None = None, dtype=np.float32) -> Module:
    """Rebuild a model from a checkpoint file.

    Pass ``config`` to insist on a particular architecture; a stored
    config that differs is rejected. Corruption (bad magic, checksum,
    truncation, structural mismatch) raises IntegrityError.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 14:
        raise IntegrityError(f"{path}: too short to be a checkpoint ({len(blob)} bytes)")
    stored_crc, = struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise IntegrityError(
            f"{path}: checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    r = _Reader(blob[:-4], path)
    if r.take(4, "magic") != MAGIC:
        raise IntegrityError(f"{path}: bad magic, not a checkpoint file")
    version, = r.unpack("<H", "version")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    config_len, = r.unpack("<I", "config length")
    try:
        stored_config = ModelConfig(**json.loads(r.take(config_len, "config")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise IntegrityError(f"{path}: malformed embedded config ({exc})") from exc
    if config is not None and stored_config != config:
        raise ValueError(
            f"{path}: checkpoint config does not match the requested one "
            f"(stored {stored_config}, requested {config})"
        )

    model = build_model(stored_config, seed=0, dtype=dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    while r.pos < len(r.blob):
        name_len, = r.unpack("<H", "entry name length")
        name = r.take(name_len, "entry name").decode()
        tag, rank = r.unpack("<BB", f"{name} header")
        if tag not in _TAG_DTYPES:
            raise IntegrityError(f"{path}: entry {name} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(count * _TAG_DTYPES[tag].itemsize, f"{name} payload")
        arr = np.frombuffer(payload, dtype=_TAG_DTYPES[tag]).reshape(dims).astype(dtype)
        if name in params:
            if params[name].data.shape != arr.shape:
                raise IntegrityError(
                    f"{path}: entry {name} has shape {arr.shape}, model expects {params[name].data.shape}"
                )
            params[name].data = arr
            params[name].zero_grad()
        elif name in buffers:
            if buffers[name].shape != arr.shape:
                raise IntegrityError(
                    f"{path}: entry {name} has shape {arr.shape}, model expects {buffers[name].shape}"
                )
            buffers[name][...] = arr
        else:
            raise IntegrityError(f"{path}: entry {name} does not exist in a {stored_config.family} model")
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise IntegrityError(f"{path}: checkpoint is missing entries: {sorted(missing)[:5]}")
    model.eval()
    return model


def file_digest(path) -> str:
    """sha256 hex digest of a file, for report metadata."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
