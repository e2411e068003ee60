"""Building blocks shared by both denoisers."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..autodiff import ParamStore, Tensor, ops
from ..errors import ConfigError, ShapeError


def embedding_frequencies(dim: int) -> np.ndarray:
    """Geometric frequencies from 1 down to 1e-4, ``dim // 2`` of them."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be a positive even number, got {dim}")
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return np.exp(-np.log(1e4) * np.arange(half) / (half - 1))


def sinusoidal_time_embedding(t, dim: int) -> Tensor:
    """[sin(t w), cos(t w)]; scalar t gives shape [dim], a vector gives [N, dim]."""
    w = embedding_frequencies(dim)
    ts = np.asarray(t, dtype=np.float64)
    if np.any(ts < 0):
        raise ConfigError("diffusion steps must be non-negative")
    arg = ts[..., None] * w
    return Tensor(np.concatenate([np.sin(arg), np.cos(arg)], axis=-1))


def gn_groups(c: int, max_groups: int = 8) -> int:
    """Largest group count <= max_groups dividing c."""
    for g in range(min(max_groups, c), 0, -1):
        if c % g == 0:
            return g
    return 1


def as_rows(emb: Tensor) -> Tensor:
    return emb if emb.ndim == 2 else ops.reshape(emb, (1, emb.shape[0]))


def mlp(emb: Tensor, layers: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """linear(silu(.)) applied once per layer; input [E] or [N, E]."""
    h = as_rows(emb)
    for w, b in layers:
        if w.shape[1] != h.shape[1]:
            raise ConfigError(f"MLP layer expects {w.shape[1]} inputs, got {h.shape[1]}")
        h = ops.linear(ops.silu(h), w, b)
    return h


def film_coefficients(emb: Tensor, layers, channels: int) -> Tuple[Tensor, Tensor]:
    """Per-channel (scale, shift), each shaped [N or 1, C, 1, 1]."""
    out = mlp(emb, layers)
    if out.shape[1] != 2 * channels:
        raise ConfigError(f"FiLM MLP produces {out.shape[1]} values, need 2*C = {2 * channels}")
    n = out.shape[0]
    scale = ops.reshape(ops.slice_axis(out, 0, channels, 1), (n, channels, 1, 1))
    shift = ops.reshape(ops.slice_axis(out, channels, 2 * channels, 1), (n, channels, 1, 1))
    return scale, shift


def apply_film(h: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    if scale.shape[1] != h.shape[1]:
        raise ShapeError(f"FiLM has {scale.shape[1]} channels, features have {h.shape[1]}")
    return ops.add(ops.mul(h, ops.add(scale, 1.0)), shift)


def film_modulation(h: Tensor, emb: Tensor, layers) -> Tensor:
    """h * (1 + scale) + shift with (scale, shift) = MLP(emb)."""
    scale, shift = film_coefficients(emb, layers, h.shape[1])
    return apply_film(h, scale, shift)


# ------------------------------------------------------------ initialisation

class Init:
    """Deterministic parameter factory writing into a ParamStore."""

    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def _uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name: str, ci: int, co: int, k: int, zero: bool = False):
        shape = (co, ci, k, k)
        w = np.zeros(shape) if zero else self._uniform(shape, ci * k * k)
        return self.store.add(name + ".w", w), self.store.add(name + ".b", np.zeros(co))

    def linear(self, name: str, d_in: int, d_out: int):
        w = self._uniform((d_out, d_in), d_in)
        return self.store.add(name + ".w", w), self.store.add(name + ".b", np.zeros(d_out))

    def norm(self, name: str, c: int):
        return self.store.add(name + ".gamma", np.ones(c)), self.store.add(name + ".beta", np.zeros(c))

    def attention(self, name: str, c: int):
        return tuple(
            self.store.add(f"{name}.{p}", self._uniform((c, c), c)) for p in ("wq", "wk", "wv", "wo")
        )


def conv(params: ParamStore, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[name + ".w"]
    return ops.conv2d(x, w, params[name + ".b"], stride=stride, padding=w.shape[2] // 2)


def norm(params: ParamStore, name: str, x: Tensor) -> Tensor:
    gamma = params[name + ".gamma"]
    return ops.group_norm(x, gn_groups(x.shape[1]), gamma, params[name + ".beta"])


def linear_pair(params: ParamStore, name: str):
    return params[name + ".w"], params[name + ".b"]


def attention(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return ops.spatial_attention(x, *(params[f"{name}.{p}"] for p in ("wq", "wk", "wv", "wo")))


def time_embedding(params: ParamStore, t, dim: int) -> Tensor:
    """Sinusoid followed by the shared two-layer MLP; returns [N or 1, E]."""
    e = as_rows(sinusoidal_time_embedding(t, dim))
    e = ops.linear(e, *linear_pair(params, "temb.0"))
    return ops.linear(ops.silu(e), *linear_pair(params, "temb.1"))


def init_time_mlp(init: Init, dim: int) -> None:
    init.linear("temb.0", dim, dim)
    init.linear("temb.1", dim, dim)
