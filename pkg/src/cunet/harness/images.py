"""8-bit PNG output for samples in [-1, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ShapeError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """round((x + 1) / 2 * 255) clamped to 0..255, [C, H, W] -> [H, W(, C)]."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ShapeError(f"image must be [1|3, H, W], got {x.shape}")
    q = np.clip(np.round((x + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)
    return q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)


def save_png(path, img: np.ndarray) -> None:
    q = to_uint8(img)
    Image.fromarray(q).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Back to [C, H, W] floats on the 8-bit grid."""
    a = np.asarray(Image.open(path), dtype=np.float64)
    a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
    return a / 127.5 - 1.0
