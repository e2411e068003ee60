"""Binary checkpoint: little-endian header, config text, named float32 tensors.

Layout::

    b"CUN1"                      magic
    u32 version
    u32 config length, bytes     canonical RunConfig text (UTF-8)
    u64 entry count
    per entry:
      u32 name length, bytes     UTF-8 parameter name
      u64 rank, u64 x rank dims
      f32 x numel                little-endian payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from ..autodiff import ParamStore
from ..errors import ConfigError, FormatError
from ..models import init_params
from .config import RunConfig

MAGIC = b"CUN1"
VERSION = 1


def header_size(config_text: str) -> int:
    return 4 + 4 + 4 + len(config_text.encode("utf-8")) + 8


def entry_size(name: str, shape) -> int:
    return 4 + len(name.encode("utf-8")) + 8 * (1 + len(shape)) + 4 * int(np.prod(shape, dtype=np.int64))


def encode_checkpoint(store: ParamStore, cfg: RunConfig) -> bytes:
    blob = cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<Q", len(store))]
    for name, t in store.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<Q{t.ndim}Q", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(store: ParamStore, cfg: RunConfig, path) -> bytes:
    """Write atomically (temp file + rename); returns the bytes written."""
    data = encode_checkpoint(store, cfg)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> Tuple[ParamStore, RunConfig]:
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, blob_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
    try:
        cfg = RunConfig.from_text(r.take(blob_len).decode("utf-8"), f"{path} config")
    except (UnicodeDecodeError, ConfigError) as e:
        raise FormatError(f"{path}: unreadable embedded config: {e}") from e
    (count,) = r.unpack("<Q")
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: parameter name is not UTF-8") from e
        if name in entries:
            raise FormatError(f"{path}: duplicate parameter name {name!r}")
        (rank,) = r.unpack("<Q")
        dims = r.unpack(f"<{rank}Q")
        numel = int(np.prod(dims, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(4 * numel), dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after the last entry")

    # the stored tensors must match the architecture the config describes
    expected = init_params(cfg.model_config(), seed=0)
    missing = [k for k in expected if k not in entries]
    extra = [k for k in entries if k not in expected]
    if missing or extra:
        raise FormatError(f"{path}: parameters do not match the model config (missing {missing[:3]}, extra {extra[:3]})")
    store = ParamStore()
    for name, t in expected.items():
        if entries[name].shape != t.shape:
            raise FormatError(f"{path}: {name!r} has shape {entries[name].shape}, config implies {t.shape}")
        store.add(name, entries[name], trainable=t.requires_grad)
    return store, cfg


def load_checkpoint(path, expect: RunConfig = None) -> Tuple[ParamStore, RunConfig]:
    """Load and validate; with ``expect`` the [model] sections must agree."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"checkpoint not found: {p}")
    store, cfg = decode_checkpoint(p.read_bytes(), str(p))
    if expect is not None and expect["model"] != cfg["model"]:
        raise FormatError(f"{p}: checkpoint model section differs from the requested model")
    return store, cfg
