"""Discrete U-Net baseline with stacked residual blocks."""

from __future__ import annotations

from ..autodiff import ParamStore, Tensor, ops
from .config import UNetConfig
from .cunet import check_input
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


def res_block(params: ParamStore, name: str, x: Tensor, temb: Tensor) -> Tensor:
    h = conv(params, name + ".conv1", ops.silu(norm(params, name + ".norm1", x)))
    h = apply_film(h, *film_coefficients(temb, [linear_pair(params, name + ".film")], h.shape[1]))
    h = conv(params, name + ".conv2", ops.silu(norm(params, name + ".norm2", h)))
    skip = conv(params, name + ".skip", x) if name + ".skip.w" in params else x
    return ops.add(h, skip)


def unet_forward(x_t: Tensor, t_step, params: ParamStore, cfg: UNetConfig, **_) -> Tensor:
    check_input(x_t, cfg.in_channels, cfg.downsample_factor)
    temb = time_embedding(params, t_step, cfg.time_embed_dim)
    L = cfg.levels
    h = conv(params, "stem", x_t)
    hs = [h]
    for i in range(L):
        for j in range(cfg.res_blocks_per_level):
            h = res_block(params, f"down_{i}.res_{j}", h, temb)
            if i in cfg.attention_levels:
                h = attention(params, f"down_{i}.attn_{j}", h)
            hs.append(h)
        if i < L - 1:
            h = conv(params, f"down_{i}.down", h, stride=2)
            hs.append(h)
    h = res_block(params, "mid.res_0", h, temb)
    h = attention(params, "mid.attn", h)
    h = res_block(params, "mid.res_1", h, temb)
    for i in reversed(range(L)):
        for j in range(cfg.res_blocks_per_level + 1):
            h = res_block(params, f"up_{i}.res_{j}", ops.concat([h, hs.pop()], axis=1), temb)
            if i in cfg.attention_levels:
                h = attention(params, f"up_{i}.attn_{j}", h)
        if i > 0:
            h = conv(params, f"up_{i}.up", ops.upsample_nearest(h, 2))
    h = ops.silu(norm(params, "head.norm", h))
    return conv(params, "head.conv", h)


def _init_res(init: Init, name: str, ci: int, co: int, emb: int) -> None:
    init.norm(name + ".norm1", ci)
    init.conv(name + ".conv1", ci, co, 3)
    init.linear(name + ".film", emb, 2 * co)
    init.norm(name + ".norm2", co)
    init.conv(name + ".conv2", co, co, 3)
    if ci != co:
        init.conv(name + ".skip", ci, co, 1)


def init_unet(cfg: UNetConfig, seed: int) -> ParamStore:
    store = ParamStore()
    init = Init(store, seed)
    E = cfg.time_embed_dim
    L = cfg.levels
    base = cfg.base_channels
    init_time_mlp(init, E)
    init.conv("stem", cfg.in_channels, base, 3)
    chans = [base]
    c = base
    for i, m in enumerate(cfg.channel_mults):
        for j in range(cfg.res_blocks_per_level):
            _init_res(init, f"down_{i}.res_{j}", c, base * m, E)
            c = base * m
            if i in cfg.attention_levels:
                init.attention(f"down_{i}.attn_{j}", c)
            chans.append(c)
        if i < L - 1:
            init.conv(f"down_{i}.down", c, c, 3)
            chans.append(c)
    _init_res(init, "mid.res_0", c, c, E)
    init.attention("mid.attn", c)
    _init_res(init, "mid.res_1", c, c, E)
    for i in reversed(range(L)):
        co = base * cfg.channel_mults[i]
        for j in range(cfg.res_blocks_per_level + 1):
            _init_res(init, f"up_{i}.res_{j}", c + chans.pop(), co, E)
            c = co
            if i in cfg.attention_levels:
                init.attention(f"up_{i}.attn_{j}", c)
        if i > 0:
            init.conv(f"up_{i}.up", c, c, 3)
    init.norm("head.norm", c)
    init.conv("head.conv", c, cfg.in_channels, 3, zero=True)
    return store
