"""Continuous U-Net: every feature transform is a second-order neural ODE."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import ParamStore, Tensor, ops
from ..errors import ConfigError, ShapeError
from ..ode import NfeCounter, solve_second_order
from .config import CUNetConfig
from .layers import (
    Init,
    apply_film,
    attention,
    conv,
    film_coefficients,
    init_time_mlp,
    linear_pair,
    norm,
    time_embedding,
)


def block_names(cfg: CUNetConfig) -> list:
    return [f"block_{k}" for k in range(1, cfg.blocks_K + 1)]


def block_widths(cfg: CUNetConfig) -> list:
    """Channel width of each dynamic block in execution order."""
    w = list(cfg.widths)
    return w + [w[-1]] + w[::-1]


def derivative_fn(
    x: Tensor,
    v: Tensor,
    t_ode: float,
    film,
    params: ParamStore,
    prefix: str,
    use_residual: bool,
) -> Tensor:
    """Acceleration f(x, x', t) for one dynamic block.

    ``film`` is the block's precomputed (scale, shift) pair. The ODE-time
    plane joins after the first normalisation, which would otherwise map a
    constant channel to zero.
    """
    if x.shape != v.shape:
        raise ShapeError(f"derivative_fn: x {x.shape} and v {v.shape} differ")
    n, _, hgt, wid = x.shape
    h = ops.silu(norm(params, prefix + ".f.norm1", ops.concat([x, v], axis=1)))
    plane = Tensor(np.full((n, 1, hgt, wid), float(t_ode)))
    h = conv(params, prefix + ".f.conv1", ops.concat([h, plane], axis=1))
    h = apply_film(h, *film)
    h = ops.silu(norm(params, prefix + ".f.norm2", h))
    a = conv(params, prefix + ".f.conv2", h)
    if use_residual:
        a = ops.add(a, conv(params, prefix + ".f.res", x))
    return a


def dynamic_block_forward(
    x0: Tensor,
    temb: Tensor,
    params: ParamStore,
    prefix: str,
    cfg: CUNetConfig,
    counter: Optional[NfeCounter] = None,
) -> Tensor:
    """x(t1) of x'' = f(x, x', t), x(t0) = x0, x'(t0) = g(x0)."""
    hidden = params[prefix + ".f.conv1.w"].shape[0]
    layers = [linear_pair(params, prefix + ".film.0"), linear_pair(params, prefix + ".film.1")]
    film = film_coefficients(temb, layers, hidden)

    def f_a(x, v, t, ctx):
        return derivative_fn(x, v, t, ctx, params, prefix, cfg.use_residual)

    def g(x):
        return conv(params, prefix + ".g", x)

    x1, _ = solve_second_order(f_a, g, x0, cfg.solver, context=film, counter=counter)
    return x1


def check_input(x: Tensor, in_channels: int, factor: int) -> None:
    if x.ndim != 4 or x.shape[1] != in_channels:
        raise ShapeError(f"expected input [N,{in_channels},H,W], got {x.shape}")
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ConfigError(f"resolution {x.shape[2]}x{x.shape[3]} must be divisible by {factor}")


def cunet_forward(
    x_t: Tensor,
    t_step,
    params: ParamStore,
    cfg: CUNetConfig,
    counter: Optional[NfeCounter] = None,
    trace: Optional[dict] = None,
) -> Tensor:
    """Denoiser output, same shape as ``x_t``.

    ``t_step`` is an int or one step per batch row. When ``trace`` is a dict
    it receives (input, output) arrays for every dynamic block.
    """
    check_input(x_t, cfg.in_channels, cfg.downsample_factor)
    temb = time_embedding(params, t_step, cfg.time_embed_dim)
    names = iter(block_names(cfg))

    def block(h):
        name = next(names)
        out = dynamic_block_forward(h, temb, params, name, cfg, counter)
        if trace is not None:
            trace[name] = (h.data.copy(), out.data.copy())
        return out

    L = cfg.levels
    strides = cfg.stride_schedule
    h = conv(params, "stem", x_t)
    skips = []
    for i in range(L):
        if i > 0:
            h = conv(params, f"down_{i}", h, stride=strides[i])
        h = block(h)
        skips.append(h)
    h = block(h)
    if cfg.use_attention:
        h = attention(params, "mid.attn", h)
    for i in reversed(range(L)):
        if i < L - 1:
            h = ops.upsample_nearest(h, strides[i + 1])
        h = conv(params, f"dec_{i}.proj", h)
        h = conv(params, f"dec_{i}.merge", ops.concat([h, skips[i]], axis=1))
        h = block(h)
    h = ops.silu(norm(params, "head.norm", h))
    return conv(params, "head.conv", h)


def init_block(init: Init, prefix: str, c: int, cfg: CUNetConfig) -> None:
    hidden = cfg.hidden_width(c)
    init.norm(prefix + ".f.norm1", 2 * c)
    init.conv(prefix + ".f.conv1", 2 * c + 1, hidden, 3)
    init.norm(prefix + ".f.norm2", hidden)
    init.conv(prefix + ".f.conv2", hidden, c, 3)
    if cfg.use_residual:
        init.conv(prefix + ".f.res", c, c, 1)
    init.linear(prefix + ".film.0", cfg.time_embed_dim, cfg.film_hidden)
    init.linear(prefix + ".film.1", cfg.film_hidden, 2 * hidden)
    init.conv(prefix + ".g", c, c, 1)


def init_cunet(cfg: CUNetConfig, seed: int) -> ParamStore:
    store = ParamStore()
    init = Init(store, seed)
    w = cfg.widths
    L = cfg.levels
    init_time_mlp(init, cfg.time_embed_dim)
    init.conv("stem", cfg.in_channels, w[0], 3)
    names = iter(zip(block_names(cfg), block_widths(cfg)))
    for i in range(L):
        if i > 0:
            init.conv(f"down_{i}", w[i - 1], w[i], 3)
        init_block(init, *next(names), cfg)
    init_block(init, *next(names), cfg)
    if cfg.use_attention:
        init.attention("mid.attn", w[-1])
    c = w[-1]
    for i in reversed(range(L)):
        init.conv(f"dec_{i}.proj", c, w[i], 1)
        init.conv(f"dec_{i}.merge", 2 * w[i], w[i], 1)
        init_block(init, *next(names), cfg)
        c = w[i]
    init.norm("head.norm", w[0])
    init.conv("head.conv", w[0], cfg.in_channels, 1, zero=True)
    return store
