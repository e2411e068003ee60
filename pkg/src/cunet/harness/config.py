"""Sectioned run configuration with a closed, typed schema.

Every key has a documented default; unknown sections or keys are errors.
``to_text`` is canonical (schema order, normalised values), so the same
settings always serialise to the same bytes.
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Callable, Dict, Tuple

from ..diffusion import DiffusionConfig, make_linear_schedule
from ..errors import ConfigError
from ..models import CUNetConfig, UNetConfig
from ..ode import SolverConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> Tuple[int, ...]:
    s = s.strip()
    return tuple(int(p) for p in s.split(",")) if s else ()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(p) for p in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (parser, default, help)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, object, str]]] = {
    "model": {
        "kind": (str, "cunet", "cunet or unet"),
        "in_channels": (int, 1, "image channels"),
        "base_channels": (int, 32, "width of the first level"),
        "channel_mults": (_ints, (1, 2, 2), "width multiplier per level"),
        "time_embed_dim": (int, 128, "sinusoidal embedding width"),
        "use_attention": (_bool, True, "cunet: bottleneck attention"),
        "use_residual": (_bool, True, "cunet: residual path in the derivative"),
        "hidden_ratio": (float, 0.0625, "cunet: derivative hidden width / block width"),
        "film_hidden": (int, 256, "cunet: FiLM MLP hidden width"),
        "stride_schedule": (_ints, (), "cunet: stride into each level, empty = 1,2,2,..."),
        "res_blocks_per_level": (int, 2, "unet: residual blocks per level"),
        "attention_levels": (_ints, (), "unet: levels with attention, empty = deepest"),
    },
    "diffusion": {
        "T": (int, 1000, "diffusion steps"),
        "beta_1": (float, 1e-4, "first beta of the linear schedule"),
        "beta_T": (float, 0.02, "last beta of the linear schedule"),
        "prediction_target": (str, "auto", "noise, clean_image, or auto (cunet clean_image, unet noise)"),
        "sampler_rule": (str, "ddpm_ancestral", "ddpm_ancestral or eq1"),
        "sample_steps": (int, 0, "reverse steps when sampling, 0 = T"),
        "eq1_coefficient": (str, "beta", "eq1 rule coefficient: alpha or beta"),
    },
    "solver": {
        "method": (str, "rk4", "euler, heun, rk4 or dopri5"),
        "fixed_steps": (int, 2, "steps per block for fixed-step methods"),
        "rtol": (float, 1e-4, "dopri5 relative tolerance"),
        "atol": (float, 1e-4, "dopri5 absolute tolerance"),
        "max_steps": (int, 10000, "dopri5 step cap"),
    },
    "train": {
        "batch": (int, 32, "images per optimiser step"),
        "lr": (float, 2e-3, "Adam learning rate"),
        "steps": (int, 2000, "optimiser steps"),
        "seed": (int, 0, "parameter init and batch sampling seed"),
        "log_every": (int, 100, "progress line interval, 0 = quiet"),
        "out": (str, "run", "output directory for checkpoint and manifest"),
    },
    "data": {
        "source": (str, "synthetic", "synthetic or idx"),
        "kind": (str, "gaussian_blobs", "synthetic kind: gaussian_blobs, checker, rings"),
        "n": (int, 2000, "synthetic image count"),
        "size": (int, 16, "synthetic image side"),
        "seed": (int, 0, "synthetic generator seed"),
        "images": (str, "", "idx images path"),
        "labels": (str, "", "idx labels path (optional)"),
        "limit": (int, 0, "use only the first n idx images, 0 = all"),
    },
    "eval": {
        "n": (int, 4096, "generated images for the Frechet proxy"),
        "extractor_seed": (int, 7919, "feature projection seed"),
        "features": (int, 64, "feature dimension d"),
        "grid": (_ints, (1, 2, 5, 10, 20, 30, 50, 80, 100), "sweep step counts, capped at T"),
        "seed": (int, 0, "sampling seed"),
    },
}

_CHOICES = {
    ("model", "kind"): ("cunet", "unet"),
    ("data", "source"): ("synthetic", "idx"),
    ("diffusion", "prediction_target"): ("auto", "noise", "clean_image"),
}


class RunConfig:
    """Fully resolved settings; read with ``cfg["section"]["key"]``."""

    def __init__(self, values: Dict[str, Dict[str, object]] = None):
        self._v = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, keys in (values or {}).items():
            for k, v in keys.items():
                self._check_key(sec, k)
                self._v[sec][k] = v
        self._validate()

    @staticmethod
    def _check_key(sec: str, key: str) -> None:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {key!r} in [{sec}]")

    def _validate(self) -> None:
        for (sec, key), choices in _CHOICES.items():
            if self._v[sec][key] not in choices:
                raise ConfigError(f"[{sec}] {key} must be one of {list(choices)}, got {self._v[sec][key]!r}")
        for sec in ("train", "eval"):
            for key in ("steps", "batch", "n"):
                if key in self._v[sec] and self._v[sec][key] < 0:
                    raise ConfigError(f"[{sec}] {key} must be >= 0")
        # building the typed configs runs their own checks
        self.model_config()
        self.diffusion_config()

    def __getitem__(self, sec: str) -> Dict[str, object]:
        return dict(self._v[sec])

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._v == other._v

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        cp.optionxform = str  # keep key case (T, beta_T)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from e
        values: Dict[str, Dict[str, object]] = {}
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                cls._check_key(sec, key)
                try:
                    values.setdefault(sec, {})[key] = SCHEMA[sec][key][0](raw)
                except ValueError as e:
                    raise ConfigError(f"{source}: [{sec}] {key} = {raw!r}: {e}") from e
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(encoding="utf-8"), str(p))

    def override(self, assignments) -> "RunConfig":
        """New config with ``section.key=value`` strings applied."""
        values = {s: dict(k) for s, k in self._v.items()}
        for item in assignments:
            lhs, eq, raw = item.partition("=")
            sec, dot, key = lhs.strip().partition(".")
            if not eq or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            self._check_key(sec, key)
            try:
                values[sec][key] = SCHEMA[sec][key][0](raw.strip())
            except ValueError as e:
                raise ConfigError(f"override {item!r}: {e}") from e
        return RunConfig(values)

    def to_text(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_fmt(self._v[sec][k])}" for k in keys]
            lines.append("")
        return "\n".join(lines)

    def flat_items(self):
        """(section.key, value text) pairs in canonical order."""
        return [(f"{sec}.{k}", _fmt(self._v[sec][k])) for sec, keys in SCHEMA.items() for k in keys]

    # ------------------------------------------------------- typed views

    def solver_config(self) -> SolverConfig:
        s = self._v["solver"]
        return SolverConfig(
            method=s["method"], fixed_steps=s["fixed_steps"], rtol=s["rtol"], atol=s["atol"], max_steps=s["max_steps"]
        )

    def model_config(self):
        m = self._v["model"]
        common = dict(
            in_channels=m["in_channels"],
            base_channels=m["base_channels"],
            channel_mults=m["channel_mults"],
            time_embed_dim=m["time_embed_dim"],
        )
        if m["kind"] == "unet":
            return UNetConfig(
                res_blocks_per_level=m["res_blocks_per_level"],
                attention_levels=frozenset(m["attention_levels"]) if m["attention_levels"] else None,
                **common,
            )
        return CUNetConfig(
            solver=self.solver_config(),
            use_attention=m["use_attention"],
            use_residual=m["use_residual"],
            stride_schedule=m["stride_schedule"] or None,
            hidden_ratio=m["hidden_ratio"],
            film_hidden=m["film_hidden"],
            **common,
        )

    def matched_unet(self) -> UNetConfig:
        """U-Net baseline sharing the channel settings of the [model] section."""
        m = self._v["model"]
        return UNetConfig(
            in_channels=m["in_channels"],
            base_channels=m["base_channels"],
            channel_mults=m["channel_mults"],
            time_embed_dim=m["time_embed_dim"],
            res_blocks_per_level=m["res_blocks_per_level"],
            attention_levels=frozenset(m["attention_levels"]) if m["attention_levels"] else None,
        )

    def prediction_target(self) -> str:
        t = self._v["diffusion"]["prediction_target"]
        if t != "auto":
            return t
        return "clean_image" if self._v["model"]["kind"] == "cunet" else "noise"

    def diffusion_config(self, sample_steps: int = None) -> DiffusionConfig:
        d = self._v["diffusion"]
        steps = sample_steps if sample_steps is not None else (d["sample_steps"] or None)
        return DiffusionConfig(
            schedule=make_linear_schedule(d["T"], d["beta_1"], d["beta_T"]),
            prediction_target=self.prediction_target(),
            sampler_rule=d["sampler_rule"],
            sample_steps=steps,
            eq1_coefficient=d["eq1_coefficient"],
        )
