"""Fixed random-projection features and the Frechet proxy built on them.

Pipeline: grayscale, centre crop to a square, box resize to 16x16, flatten,
project with a seeded Gaussian matrix to ``d`` features, then standardise
with per-feature constants fitted once on a reference set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from PIL import Image

from ..errors import ContractError, ShapeError
from .frechet import FidWarning, fit_stats, frechet_distance

PROXY_SIZE = 16
EXTRACTOR_SEED = 7919
FEATURE_DIM = 64
# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])


def to_proxy_grid(images: np.ndarray, size: int = PROXY_SIZE) -> np.ndarray:
    """[N, C, H, W] in [-1, 1] -> [N, size, size] grayscale."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"images must be [N, C, H, W], got shape {x.shape}")
    lo, hi = (x.min(), x.max()) if x.size else (0.0, 0.0)
    if lo < -1.0 or hi > 1.0:
        warnings.warn(f"image values outside [-1, 1] (min {lo:.3g}, max {hi:.3g}); clamping", FidWarning)
        x = np.clip(x, -1.0, 1.0)
    n, c, h, w = x.shape
    if c == 3:
        x = np.tensordot(x, LUMA, axes=([1], [0]))
    elif c == 1:
        x = x[:, 0]
    else:
        raise ShapeError(f"expected 1 or 3 channels, got {c}")
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    x = x[:, top:top + side, left:left + side]
    if side == size:
        return np.ascontiguousarray(x)
    if side % size == 0:
        f = side // size
        return x.reshape(n, size, f, size, f).mean(axis=(2, 4))
    out = np.empty((n, size, size))
    for i in range(n):
        im = Image.fromarray(x[i].astype(np.float32))
        out[i] = np.asarray(im.resize((size, size), Image.Resampling.BOX), dtype=np.float64)
    return out


def projection_matrix(seed: int = EXTRACTOR_SEED, d: int = FEATURE_DIM, size: int = PROXY_SIZE) -> np.ndarray:
    """[size*size, d] Gaussian projection scaled by 1/sqrt(size*size)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((size * size, d)) / size


@dataclass(frozen=True)
class FeatureExtractor:
    seed: int = EXTRACTOR_SEED
    d: int = FEATURE_DIM
    size: int = PROXY_SIZE
    # fitted standardisation constants; None means raw projections
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def matrix(self) -> np.ndarray:
        return projection_matrix(self.seed, self.d, self.size)

    def raw(self, images: np.ndarray) -> np.ndarray:
        grid = to_proxy_grid(images, self.size)
        return grid.reshape(grid.shape[0], -1) @ self.matrix()

    def fit(self, reference: np.ndarray) -> "FeatureExtractor":
        f = self.raw(reference)
        if f.shape[0] < 2:
            raise ContractError(f"need at least 2 reference images to fit, got {f.shape[0]}")
        std = f.std(axis=0)
        return replace(self, shift=f.mean(axis=0), scale=np.where(std > 1e-12, std, 1.0))

    @property
    def fitted(self) -> bool:
        return self.shift is not None

    def __call__(self, images: np.ndarray) -> np.ndarray:
        f = self.raw(images)
        if self.fitted:
            f = (f - self.shift) / self.scale
        return f


def extract_features(images: np.ndarray, extractor: Optional[FeatureExtractor] = None) -> np.ndarray:
    """[n, d] features; raw projections when the extractor is unfitted."""
    return (extractor or FeatureExtractor())(images)


def fid_proxy(
    generated: np.ndarray,
    reference: np.ndarray,
    extractor: Optional[FeatureExtractor] = None,
    workers: int = 1,
) -> float:
    """Frechet distance between feature Gaussians of two image batches.

    Standardisation is fitted on ``reference`` unless ``extractor`` is
    already fitted. Small batches raise FidWarning but still return a value.
    """
    gen = np.asarray(generated)
    ref = np.asarray(reference)
    if gen.shape[0] < 2 or ref.shape[0] < 2:
        raise ContractError(f"need at least 2 images per set, got {gen.shape[0]} and {ref.shape[0]}")
    ext = extractor or FeatureExtractor()
    if not ext.fitted:
        ext = ext.fit(ref)
    for name, batch in (("generated", gen), ("reference", ref)):
        if batch.shape[0] < 2 * ext.d:
            warnings.warn(f"{name} set has {batch.shape[0]} images, fewer than 2*d = {2 * ext.d}", FidWarning)
    a = fit_stats(ext(gen), workers)
    b = fit_stats(ext(ref), workers)
    return frechet_distance(a, b)
