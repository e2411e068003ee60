"""Parameter, FLOP, memory and wall-clock accounting for the denoisers.

FLOPs are not estimated from a separate layer table: a batch-1 forward pass
is traced with every primitive charging its cost formula (see
:mod:`cunet.autodiff.ops`). Charges raised inside an ODE solve are tagged
``ode`` so the solver-dependent share can be reported separately.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .autodiff import ParamStore, Tensor, no_tape
from .autodiff.tensor import _cost_hook, current_cost_scope
from .errors import ConfigError, ContractError
from .models import CUNetConfig, forward, init_params
from .ode import NfeCounter, SolverConfig

BYTES_PER_PARAM = 4
# NFE per block for reporting: rk4 with two steps
DEFAULT_BUDGET = SolverConfig(method="rk4", fixed_steps=2)


class CostMeter:
    """Collects FLOP charges by (scope, primitive kind) while active."""

    def __init__(self):
        self.by_scope = defaultdict(float)
        self.by_kind = defaultdict(float)

    def _hook(self, kind: str, flops: float) -> None:
        self.by_scope[current_cost_scope()] += flops
        self.by_kind[kind] += flops

    def __enter__(self) -> "CostMeter":
        self._token = _cost_hook.set(self._hook)
        return self

    def __exit__(self, *exc) -> None:
        _cost_hook.reset(self._token)

    @property
    def total(self) -> float:
        return float(sum(self.by_scope.values()))


def count_params(store: ParamStore) -> int:
    return store.num_params()


def memory_mb(store_or_count) -> float:
    """Parameter storage at 4 bytes each, in MiB."""
    n = store_or_count if isinstance(store_or_count, (int, np.integer)) else count_params(store_or_count)
    return BYTES_PER_PARAM * int(n) / 2**20


def _with_budget(cfg, budget: Optional[SolverConfig]):
    if not isinstance(cfg, CUNetConfig):
        return cfg
    budget = budget if budget is not None else DEFAULT_BUDGET
    if budget.adaptive:
        raise ConfigError("FLOP counting needs a fixed-step budget; adaptive NFE is data dependent")
    return replace(cfg, solver=budget)


def trace_costs(cfg, resolution: Tuple[int, int], solver_budget: Optional[SolverConfig] = None):
    """(CostMeter, nfe) for one batch-1 forward at ``resolution``."""
    cfg = _with_budget(cfg, solver_budget)
    h, w = resolution
    params = init_params(cfg, seed=0)
    x = Tensor(np.zeros((1, cfg.in_channels, h, w)))
    counter = NfeCounter()
    kwargs = {"counter": counter} if isinstance(cfg, CUNetConfig) else {}
    with no_tape(), CostMeter() as meter:
        forward(x, 0, params, cfg, **kwargs)
    return meter, counter.evaluations


def flops_forward(cfg, resolution: Tuple[int, int], solver_budget: Optional[SolverConfig] = None) -> float:
    """GFLOPs of one single-image forward pass."""
    meter, _ = trace_costs(cfg, resolution, solver_budget)
    return meter.total / 1e9


# ------------------------------------------------------------------ timing

@dataclass
class WallStats:
    mean: float
    std: float
    min: float
    repeats: int
    samples_ms: list = field(default_factory=list)
    coarse_timer: bool = False

    @property
    def cv(self) -> float:
        return self.std / self.mean if self.mean > 0 else float("inf")


def host_metadata() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count() or 0,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def time_inference(
    model,
    cfg,
    repeats: int = 10,
    shape: Tuple[int, int, int] = (1, 16, 16),
    seed: int = 0,
    warmup: int = 2,
) -> WallStats:
    """Wall-clock of generating one image with every reverse step.

    ``model`` is a diffusion model callable and ``cfg`` a DiffusionConfig.
    Runs ``warmup`` untimed generations first; garbage collection is paused
    while timing.
    """
    import gc

    from .diffusion import sample

    if repeats < 3:
        raise ContractError(f"repeats must be >= 3, got {repeats}")
    for _ in range(warmup):
        sample(model, cfg, 1, shape, seed)
    times = []
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            start = time.perf_counter()
            sample(model, cfg, 1, shape, seed)
            times.append(time.perf_counter() - start)
    finally:
        if enabled:
            gc.enable()
    ms = [1e3 * t for t in times]
    mean = statistics.fmean(ms)
    resolution_ms = 1e3 * time.get_clock_info("perf_counter").resolution
    return WallStats(
        mean=mean,
        std=statistics.stdev(ms),
        min=min(ms),
        repeats=repeats,
        samples_ms=ms,
        coarse_timer=resolution_ms > min(1.0, 0.01 * mean),
    )


# ------------------------------------------------------------------ reports

_REPORT_KEYS = (
    "model",
    "resolution",
    "solver",
    "param_count",
    "gflops_forward",
    "gflops_static",
    "gflops_ode",
    "memory_mb",
    "nfe",
    "wall_ms_mean",
    "wall_ms_std",
    "wall_ms_min",
    "wall_repeats",
    "timer_warning",
)


@dataclass
class EfficiencyReport:
    model: str
    resolution: Tuple[int, int]
    solver: str
    param_count: int
    gflops_forward: float
    gflops_static: float
    gflops_ode: float
    memory_mb: float
    nfe: int
    wall: Optional[WallStats] = None
    host: dict = field(default_factory=host_metadata)

    def to_text(self) -> str:
        """Flat ``key: value`` lines in a fixed order."""
        vals = {
            "model": self.model,
            "resolution": f"{self.resolution[0]}x{self.resolution[1]}",
            "solver": self.solver,
            "param_count": str(self.param_count),
            "gflops_forward": f"{self.gflops_forward:.6f}",
            "gflops_static": f"{self.gflops_static:.6f}",
            "gflops_ode": f"{self.gflops_ode:.6f}",
            "memory_mb": f"{self.memory_mb:.4f}",
            "nfe": str(self.nfe),
        }
        if self.wall is not None:
            vals.update(
                wall_ms_mean=f"{self.wall.mean:.4f}",
                wall_ms_std=f"{self.wall.std:.4f}",
                wall_ms_min=f"{self.wall.min:.4f}",
                wall_repeats=str(self.wall.repeats),
                timer_warning="yes" if self.wall.coarse_timer else "no",
            )
        lines = [f"{k}: {vals[k]}" for k in _REPORT_KEYS if k in vals]
        lines += [f"host_{k}: {v}" for k, v in sorted(self.host.items())]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(": ")
                out[key] = value
        return out


def _solver_label(cfg, budget: SolverConfig) -> str:
    if not isinstance(cfg, CUNetConfig):
        return "none"
    return f"{budget.method}x{budget.fixed_steps}"


def profile_model(
    cfg,
    resolution: Tuple[int, int],
    label: str,
    solver_budget: Optional[SolverConfig] = None,
    wall: Optional[WallStats] = None,
) -> EfficiencyReport:
    budget = solver_budget if solver_budget is not None else DEFAULT_BUDGET
    meter, nfe = trace_costs(cfg, resolution, budget)
    params = count_params(init_params(cfg, seed=0))
    return EfficiencyReport(
        model=label,
        resolution=tuple(resolution),
        solver=_solver_label(cfg, budget),
        param_count=params,
        gflops_forward=meter.total / 1e9,
        gflops_static=meter.by_scope.get("static", 0.0) / 1e9,
        gflops_ode=meter.by_scope.get("ode", 0.0) / 1e9,
        memory_mb=memory_mb(params),
        nfe=nfe,
        wall=wall,
    )


def profile_suite(cunet_cfg, unet_cfg, resolution, solver_budget: Optional[SolverConfig] = None) -> list:
    """Reports for the four cU-Net variants followed by the U-Net."""
    from .models import ABLATIONS

    rows = [
        profile_model(cunet_cfg.ablation(a), resolution, "cU-Net" if a == "full" else f"cU-Net {a}", solver_budget)
        for a in ABLATIONS
    ]
    rows.append(profile_model(unet_cfg, resolution, "U-Net", solver_budget))
    return rows


def format_table(rows) -> str:
    head = f"{'model':<16}{'params':>12}{'GFLOPs':>12}{'MB':>10}{'NFE':>6}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.model:<16}{r.param_count:>12d}{r.gflops_forward:>12.4f}{r.memory_mb:>10.3f}{r.nfe:>6d}")
    return "\n".join(lines) + "\n"
