"""Training loop, model construction from a RunConfig, and the FID-vs-steps sweep."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import OptimizerState, ParamStore, Tape, adam_step, backward
from ..diffusion import DiffusionConfig, sample, training_loss
from ..errors import ConfigError, ContractError, NumericFault
from ..models import forward, init_params
from .config import RunConfig
from .data import Dataset, load_idx_dataset, synth_dataset
from .features import FeatureExtractor, fid_proxy

MA_WINDOW = 10
_BATCH_STREAM = 2


def make_model(params: ParamStore, model_cfg) -> Callable:
    return lambda x, t: forward(x, t, params, model_cfg)


def load_data(cfg: RunConfig) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        ds = synth_dataset(d["kind"], d["n"], d["size"], d["seed"])
    else:
        if not d["images"]:
            raise ConfigError("[data] source = idx needs an images path")
        ds = load_idx_dataset(d["images"], d["labels"] or None)
        if d["limit"]:
            ds = Dataset(ds.images[: d["limit"]], None if ds.labels is None else ds.labels[: d["limit"]], ds.source)
    if ds.shape[0] != cfg["model"]["in_channels"]:
        raise ConfigError(f"data has {ds.shape[0]} channels, model expects {cfg['model']['in_channels']}")
    return ds


def moving_average(losses: Sequence[float], end: int, window: int = MA_WINDOW) -> float:
    """Mean of the ``window`` losses ending at 1-based step ``end``."""
    if end < 1 or end > len(losses):
        raise ContractError(f"step {end} outside 1..{len(losses)}")
    lo = max(0, end - window)
    return float(np.mean(losses[lo:end]))


@dataclass
class TrainResult:
    params: ParamStore
    losses: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ma_start(self) -> float:
        return moving_average(self.losses, min(MA_WINDOW, len(self.losses)))

    @property
    def ma_end(self) -> float:
        return moving_average(self.losses, len(self.losses))

    @property
    def drop(self) -> float:
        """Fractional fall of the moving-average loss from step 10 to the end."""
        return 1.0 - self.ma_end / self.ma_start


def train(
    cfg: RunConfig,
    data: Dataset,
    params: Optional[ParamStore] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Adam on the diffusion regression loss with one random step per image."""
    data.require_nonempty("training set")
    tr = cfg["train"]
    if tr["steps"] < 1 or tr["batch"] < 1:
        raise ConfigError("[train] steps and batch must be >= 1")
    model_cfg = cfg.model_config()
    diff = cfg.diffusion_config()
    if params is None:
        params = init_params(model_cfg, seed=tr["seed"])
    model = make_model(params, model_cfg)
    state = OptimizerState(lr=tr["lr"])
    rng = np.random.default_rng(np.random.SeedSequence([tr["seed"], _BATCH_STREAM]))
    T = diff.schedule.T
    result = TrainResult(params=params)
    start = time.perf_counter()
    for step in range(1, tr["steps"] + 1):
        idx = rng.integers(0, len(data), tr["batch"])
        x0 = data.images[idx]
        t = rng.integers(0, T, tr["batch"])
        eps = rng.standard_normal(x0.shape)
        with Tape() as tape:
            loss = training_loss(model, x0, t, eps, diff.schedule, diff.prediction_target)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault(f"non-finite training loss at step {step}")
        adam_step(params, backward(tape, loss, params), state)
        result.losses.append(value)
        if log and tr["log_every"] and (step % tr["log_every"] == 0 or step == tr["steps"]):
            log(f"step {step} loss {value:.5f} ma {moving_average(result.losses, step):.5f}")
    result.seconds = time.perf_counter() - start
    return result


def sweep_grid(cfg: RunConfig) -> list:
    T = cfg["diffusion"]["T"]
    grid = sorted({k for k in cfg["eval"]["grid"] if 1 <= k <= T})
    if not grid:
        raise ConfigError(f"[eval] grid has no step counts in 1..{T}")
    return grid


@dataclass
class SweepResult:
    grid: list
    fid: list

    @property
    def best_steps(self) -> int:
        return self.grid[int(np.argmin(self.fid))]

    @property
    def best_fid(self) -> float:
        return float(min(self.fid))

    def to_text(self) -> str:
        return "".join(f"steps_{k}: {v:.6f}\n" for k, v in zip(self.grid, self.fid))


def fid_sweep(
    model: Callable,
    diff: DiffusionConfig,
    reference: np.ndarray,
    grid: Sequence[int],
    n: int,
    seed: int,
    extractor: Optional[FeatureExtractor] = None,
    workers: int = 1,
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """Frechet proxy of ``n`` samples at each step count in ``grid``.

    Every grid point reuses the same seed, so the sweep is a deterministic
    function of (model, seed, grid). The extractor is fitted once on
    ``reference``.
    """
    from dataclasses import replace

    if n < 2:
        raise ContractError(f"sweep needs n >= 2 samples, got {n}")
    ext = extractor or FeatureExtractor()
    if not ext.fitted:
        ext = ext.fit(reference)
    shape = reference.shape[1:]
    fids = []
    for k in grid:
        imgs = sample(model, replace(diff, sample_steps=k), n, shape, seed, workers=workers)
        fids.append(fid_proxy(imgs, reference, ext, workers))
        if log:
            log(f"sweep steps {k} fid {fids[-1]:.4f}")
    return SweepResult(list(grid), fids)


def stderr_log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)
