"""Gaussian statistics of feature sets and the Frechet distance between them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ContractError, NumericFault

PSD_TOL = 1e-10
# rows per partial-statistics chunk; fixed so results do not depend on workers
CHUNK_ROWS = 512


class FidWarning(UserWarning):
    """Sample-size or range problems that leave the metric computable."""


@dataclass(frozen=True)
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def d(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class _Partial:
    # count, mean and centred scatter matrix of a block of rows
    n: int
    mean: np.ndarray
    m2: np.ndarray


def _partial(rows: np.ndarray) -> _Partial:
    mean = rows.mean(axis=0)
    c = rows - mean
    return _Partial(rows.shape[0], mean, c.T @ c)


def merge(a: _Partial, b: _Partial) -> _Partial:
    """Pairwise combination of two partial statistics (Chan et al.)."""
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.n / n)
    m2 = a.m2 + b.m2 + np.outer(delta, delta) * (a.n * b.n / n)
    return _Partial(n, mean, m2)


def _tree_merge(parts: list) -> _Partial:
    while len(parts) > 1:
        nxt = [merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def fit_stats(features: np.ndarray, workers: int = 1) -> FrechetStats:
    """Mean and unbiased covariance of ``features`` [n, d].

    Rows are split into fixed chunks whose partial statistics are merged in a
    fixed pairwise tree, so the result is identical for any worker count.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ContractError(f"features must be [n, d], got shape {f.shape}")
    n, d = f.shape
    if n < 2:
        raise ContractError(f"need at least 2 feature rows, got {n}")
    if n < d:
        warnings.warn(f"only {n} samples for {d} features; covariance is rank deficient", FidWarning)
    chunks = [f[i:i + CHUNK_ROWS] for i in range(0, n, CHUNK_ROWS)]
    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_partial, chunks))
    else:
        parts = [_partial(c) for c in chunks]
    total = _tree_merge(parts)
    sigma = total.m2 / (n - 1)
    return FrechetStats(mu=total.mean, sigma=0.5 * (sigma + sigma.T), n=n)


def _psd_sqrt(sigma: np.ndarray, what: str) -> np.ndarray:
    lam, vec = np.linalg.eigh(sigma)
    if lam.min() < -PSD_TOL:
        raise NumericFault(f"{what} has eigenvalue {lam.min():.3e} below -{PSD_TOL}")
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2), which shares its spectrum
    with S_a S_b.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ContractError(f"dimension mismatch: {a.mu.shape[0]} vs {b.mu.shape[0]} features")
    if a.sigma.shape != (a.d, a.d):
        raise ContractError(f"sigma must be [{a.d}, {a.d}], got {a.sigma.shape}")
    root_a = _psd_sqrt(a.sigma, "sigma_a")
    _psd_sqrt(b.sigma, "sigma_b")
    m = root_a @ b.sigma @ root_a
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    if lam.min() < -PSD_TOL:
        raise NumericFault(f"product covariance has eigenvalue {lam.min():.3e} below -{PSD_TOL}")
    tr_sqrt = float(np.sqrt(np.clip(lam, 0.0, None)).sum())
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)


def stats_from_moments(mu, sigma, n: Optional[int] = None) -> FrechetStats:
    """Build stats from known moments (handy for closed-form checks)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    return FrechetStats(mu=mu, sigma=sigma, n=int(n) if n is not None else 0)
