"""IDX ingestion and procedural synthetic datasets, all scaled to [-1, 1]."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigError, ContractError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
SYNTH_KINDS = ("gaussian_blobs", "checker", "rings")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [-1, 1]
    labels: Optional[np.ndarray] = None
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def require_nonempty(self, what: str = "dataset") -> "Dataset":
        if len(self) == 0:
            raise ContractError(f"{what} is empty")
        return self


# ------------------------------------------------------------------ IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, magic: int) -> np.ndarray:
    """Unsigned-byte IDX tensor with the expected ``magic``."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end != count:
        size = "truncated" if len(raw) - end < count else "oversized"
        raise FormatError(f"{path}: {size} payload, {len(raw) - end} bytes for dims {list(dims)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x08 type code, big-endian dims)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ContractError(f"IDX writer takes uint8 arrays, got {a.dtype}")
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx_dataset(images_path, labels_path=None) -> Dataset:
    pix = read_idx(images_path, IDX_IMAGES)
    images = pix.astype(np.float64)[:, None] / 127.5 - 1.0
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    return Dataset(images=images, labels=labels, source=f"idx:{images_path}")


# ---------------------------------------------------------------- synthetic

def _grid(size: int):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    return yy, xx


def _blobs(rng, n, size):
    yy, xx = _grid(size)
    centers = rng.uniform(size / 4, 3 * size / 4, (n, 2))
    sigma = rng.uniform(size / 10, size / 5, n)
    r2 = (yy - centers[:, 0, None, None]) ** 2 + (xx - centers[:, 1, None, None]) ** 2
    return 2.0 * np.exp(-r2 / (2 * sigma[:, None, None] ** 2)) - 1.0, {"centers": centers, "sigma": sigma}


def _checker(rng, n, size):
    yy, xx = _grid(size)
    cell = rng.integers(2, size // 2 + 1, n)
    oy, ox = rng.integers(0, size, n), rng.integers(0, size, n)
    par = ((yy + oy[:, None, None]) // cell[:, None, None] + (xx + ox[:, None, None]) // cell[:, None, None]) % 2
    return 2.0 * par - 1.0, {"cell": cell}


def _rings(rng, n, size):
    yy, xx = _grid(size)
    centers = rng.uniform(size / 4, 3 * size / 4, (n, 2))
    period = rng.uniform(size / 4, size / 2, n)
    r = np.sqrt((yy - centers[:, 0, None, None]) ** 2 + (xx - centers[:, 1, None, None]) ** 2)
    return np.cos(2 * np.pi * r / period[:, None, None]), {"centers": centers, "period": period}


_GENERATORS = {"gaussian_blobs": _blobs, "checker": _checker, "rings": _rings}


def synth_dataset(kind: str, n: int, size: int, seed: int) -> Dataset:
    """Deterministic single-channel procedural images of ``size`` x ``size``."""
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {list(SYNTH_KINDS)}")
    if size < 8:
        raise ConfigError(f"synthetic images need size >= 8, got {size}")
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), SYNTH_KINDS.index(kind)]))
    images, meta = _GENERATORS[kind](rng, n, size)
    images = np.clip(images, -1.0, 1.0).reshape(n, 1, size, size)
    return Dataset(images=images, source=f"synthetic:{kind}", meta=meta)
