"""Denoising networks: the discrete U-Net baseline and the continuous U-Net."""

from .config import ABLATIONS, CUNetConfig, UNetConfig
from .cunet import (
    block_names,
    block_widths,
    cunet_forward,
    derivative_fn,
    dynamic_block_forward,
    init_cunet,
)
from .layers import (
    apply_film,
    embedding_frequencies,
    film_coefficients,
    film_modulation,
    gn_groups,
    sinusoidal_time_embedding,
)
from .unet import init_unet, unet_forward


def init_params(cfg, seed: int = 0):
    """Deterministic parameters for either config type."""
    return init_cunet(cfg, seed) if isinstance(cfg, CUNetConfig) else init_unet(cfg, seed)


def forward(x_t, t_step, params, cfg, **kwargs):
    """Dispatch to the forward pass matching ``cfg``."""
    if isinstance(cfg, CUNetConfig):
        return cunet_forward(x_t, t_step, params, cfg, **kwargs)
    return unet_forward(x_t, t_step, params, cfg, **kwargs)


__all__ = [
    "ABLATIONS",
    "CUNetConfig",
    "UNetConfig",
    "apply_film",
    "block_names",
    "block_widths",
    "cunet_forward",
    "derivative_fn",
    "dynamic_block_forward",
    "embedding_frequencies",
    "film_coefficients",
    "film_modulation",
    "forward",
    "gn_groups",
    "init_cunet",
    "init_params",
    "init_unet",
    "sinusoidal_time_embedding",
    "unet_forward",
]
