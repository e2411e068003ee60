"""Architecture configurations for the two denoisers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

from ..errors import ConfigError
from ..ode import SolverConfig


def _check_common(cfg) -> None:
    if cfg.in_channels < 1 or cfg.base_channels < 1:
        raise ConfigError("in_channels and base_channels must be positive")
    if len(cfg.channel_mults) < 2 or any(m < 1 for m in cfg.channel_mults):
        raise ConfigError(f"channel_mults needs >= 2 positive entries, got {list(cfg.channel_mults)}")
    if cfg.time_embed_dim < 2 or cfg.time_embed_dim % 2:
        raise ConfigError(f"time_embed_dim must be even and >= 2, got {cfg.time_embed_dim}")


@dataclass(frozen=True)
class UNetConfig:
    """Discrete DDPM-style U-Net."""

    in_channels: int = 1
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 2
    # None means the deepest level only
    attention_levels: Optional[frozenset] = None
    time_embed_dim: int = 128

    kind = "unet"

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        _check_common(self)
        if self.res_blocks_per_level < 1:
            raise ConfigError("res_blocks_per_level must be >= 1")
        if self.attention_levels is None:
            object.__setattr__(self, "attention_levels", frozenset({self.levels - 1}))
        else:
            object.__setattr__(self, "attention_levels", frozenset(self.attention_levels))
        bad = [i for i in self.attention_levels if not 0 <= i < self.levels]
        if bad:
            raise ConfigError(f"attention_levels {sorted(bad)} outside 0..{self.levels - 1}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass(frozen=True)
class CUNetConfig:
    """Continuous U-Net built from second-order neural-ODE blocks."""

    in_channels: int = 1
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    time_embed_dim: int = 128
    solver: SolverConfig = field(default_factory=SolverConfig)
    use_attention: bool = True
    use_residual: bool = True
    # stride of the conv entering each level; the first entry is the stem
    stride_schedule: Optional[Tuple[int, ...]] = None
    # derivative-approximator hidden width as a fraction of the block width
    hidden_ratio: float = 1 / 16
    film_hidden: int = 256
    blocks_K: Optional[int] = None

    kind = "cunet"

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        _check_common(self)
        if self.stride_schedule is None:
            object.__setattr__(self, "stride_schedule", (1,) + (2,) * (self.levels - 1))
        object.__setattr__(self, "stride_schedule", tuple(self.stride_schedule))
        if len(self.stride_schedule) != self.levels:
            raise ConfigError(
                f"stride_schedule has {len(self.stride_schedule)} entries for {self.levels} levels"
            )
        if any(s not in (1, 2) for s in self.stride_schedule):
            raise ConfigError(f"stride values must be 1 or 2, got {list(self.stride_schedule)}")
        if self.stride_schedule[0] != 1:
            raise ConfigError("the stem keeps full resolution: stride_schedule[0] must be 1")
        if not 0 < self.hidden_ratio <= 4:
            raise ConfigError(f"hidden_ratio must be in (0, 4], got {self.hidden_ratio}")
        if self.film_hidden < 1:
            raise ConfigError("film_hidden must be positive")
        expected = 2 * self.levels + 1
        if self.blocks_K is None:
            object.__setattr__(self, "blocks_K", expected)
        elif self.blocks_K != expected:
            raise ConfigError(
                f"blocks_K={self.blocks_K} but {self.levels} levels place {expected} dynamic blocks"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def downsample_factor(self) -> int:
        f = 1
        for s in self.stride_schedule:
            f *= s
        return f

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    def hidden_width(self, c: int) -> int:
        return max(1, int(round(c * self.hidden_ratio)))

    def ablation(self, name: str) -> "CUNetConfig":
        """Variant by label: full, wo/A, wo/R or wo/A/R."""
        flags = {
            "full": (True, True),
            "wo/A": (False, True),
            "wo/R": (True, False),
            "wo/A/R": (False, False),
        }
        if name not in flags:
            raise ConfigError(f"unknown ablation {name!r}; choose from {list(flags)}")
        att, res = flags[name]
        return replace(self, use_attention=att, use_residual=res)


ABLATIONS = ("full", "wo/A", "wo/R", "wo/A/R")
