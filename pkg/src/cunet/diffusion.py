"""Noise schedule, forward corruption, training objective and reverse samplers.

Steps are zero-based: ``t = 0`` is the least noisy step and ``t = T - 1``
the most noisy. A *model* is any callable ``model(x_t: Tensor, t) -> Tensor``
where ``t`` is an int or one step per batch row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_tape, ops
from .errors import ConfigError, ContractError, NumericFault, ShapeError

TARGETS = ("noise", "clean_image")
SAMPLER_RULES = ("eq1", "ddpm_ancestral")
# which schedule coefficient plays the role of a in x <- sqrt(1-a) x + sqrt(a) (eps + U)
EQ1_COEFFICIENTS = ("alpha", "beta")

# stream tags for the per-chain generators
_INIT_STREAM = 0
_STEP_STREAM = 1


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t) -> None:
        ts = np.asarray(t)
        if not np.issubdtype(ts.dtype, np.integer) or np.any(ts < 0) or np.any(ts >= self.T):
            raise ContractError(f"diffusion step must be an integer in [0, {self.T}), got {t!r}")


def make_linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_1 <= beta_T < 1:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    beta = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    return schedule_from_betas(beta)


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("betas must be a non-empty vector in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(T=beta.size, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: NoiseSchedule = field(default_factory=lambda: make_linear_schedule(1000))
    prediction_target: str = "noise"
    sampler_rule: str = "ddpm_ancestral"
    sample_steps: Optional[int] = None
    eq1_coefficient: str = "beta"

    def __post_init__(self):
        if self.prediction_target not in TARGETS:
            raise ConfigError(f"prediction_target must be one of {TARGETS}")
        if self.sampler_rule not in SAMPLER_RULES:
            raise ConfigError(f"sampler_rule must be one of {SAMPLER_RULES}")
        if self.eq1_coefficient not in EQ1_COEFFICIENTS:
            raise ConfigError(f"eq1_coefficient must be one of {EQ1_COEFFICIENTS}")
        if self.sample_steps is None:
            object.__setattr__(self, "sample_steps", self.schedule.T)
        if not 1 <= self.sample_steps <= self.schedule.T:
            raise ConfigError(f"sample_steps must be in [1, {self.schedule.T}], got {self.sample_steps}")


# ------------------------------------------------------------------ noise

def noise_draw(seed: int, step: int, chain: int, shape, stream: int = _STEP_STREAM) -> np.ndarray:
    """Unit Gaussian draw keyed by (seed, step, chain index)."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(step), int(chain)])
    return np.random.default_rng(ss).standard_normal(shape)


def batch_noise(seed: int, step: int, chains: Sequence[int], shape, stream: int = _STEP_STREAM) -> np.ndarray:
    return np.stack([noise_draw(seed, step, c, shape, stream) for c in chains])


# ---------------------------------------------------------- forward process

def _per_row(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, eps, s: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` an int or one per row."""
    s.check_step(t)
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if eps.shape != x0d.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match image shape {x0d.shape}")
    ab = s.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        if ab.shape[0] != x0d.shape[0]:
            raise ShapeError(f"{ab.shape[0]} steps for a batch of {x0d.shape[0]}")
        ab = _per_row(ab, x0d.ndim)
    return Tensor(np.sqrt(ab) * x0d + np.sqrt(1.0 - ab) * eps)


def forward_step(x_prev: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """One Markov corruption step sqrt(1 - beta_t) x + sqrt(beta_t) eps."""
    s.check_step(t)
    return np.sqrt(1.0 - s.beta[t]) * x_prev + np.sqrt(s.beta[t]) * eps


def training_loss(model: Callable, x0, t, eps, s: NoiseSchedule, target: str = "noise") -> Tensor:
    """MSE between the model output and the configured regression target."""
    if target not in TARGETS:
        raise ConfigError(f"prediction target must be one of {TARGETS}")
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and eps {eps.shape} must match")
    x_t = q_sample(x0, t, eps, s)
    pred = model(x_t, t)
    if pred.shape != x0.shape:
        raise ContractError(f"model output {pred.shape} does not match input {x0.shape}")
    return ops.mse(pred, eps if target == "noise" else x0)


# ---------------------------------------------------------- reverse steps

def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _model_out(model, x: np.ndarray, t) -> np.ndarray:
    with no_tape():
        return _arr(model(Tensor(x), t))


def eq1_coefficient(s: NoiseSchedule, t: int, which: str) -> float:
    return float(s.alpha[t] if which == "alpha" else s.beta[t])


def reverse_step_paper(x_prev, t: int, model, eps, s: NoiseSchedule, coefficient: str = "beta"):
    """sqrt(1 - a) x + sqrt(a) eps + sqrt(a) U(x, t) with a = alpha_t or beta_t."""
    s.check_step(t)
    if coefficient not in EQ1_COEFFICIENTS:
        raise ConfigError(f"coefficient must be one of {EQ1_COEFFICIENTS}")
    x = _arr(x_prev)
    a = eq1_coefficient(s, t, coefficient)
    u = _model_out(model, x, t)
    return np.sqrt(1.0 - a) * x + np.sqrt(a) * _arr(eps) + np.sqrt(a) * u


def predicted_noise(out: np.ndarray, x_t: np.ndarray, alpha_bar: float, target: str) -> np.ndarray:
    """Noise estimate from a model output of either target type."""
    if target == "noise":
        return out
    return (x_t - np.sqrt(alpha_bar) * out) / np.sqrt(1.0 - alpha_bar)


def reverse_step_ddpm(
    x_t,
    t: int,
    model,
    eps,
    s: NoiseSchedule,
    target: str = "noise",
    model_t: Optional[int] = None,
):
    """Ancestral step: posterior mean plus sqrt(beta_t) z, no noise at t = 0.

    ``model_t`` is the step index passed to the network when ``s`` is a
    respaced schedule whose index ``t`` stands for an original step.
    """
    s.check_step(t)
    x = _arr(x_t)
    out = _model_out(model, x, t if model_t is None else model_t)
    eps_hat = predicted_noise(out, x, float(s.alpha_bar[t]), target)
    beta, alpha, ab = s.beta[t], s.alpha[t], s.alpha_bar[t]
    mean = (x - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 0:
        return mean
    return mean + np.sqrt(beta) * _arr(eps)


# ---------------------------------------------------------------- sampling

def step_indices(T: int, steps: int) -> np.ndarray:
    """Evenly spaced original step indices, ascending; one step means T - 1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sample steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(0, T - 1, steps)).astype(np.int64)


def respaced_schedule(s: NoiseSchedule, indices: np.ndarray) -> NoiseSchedule:
    """Schedule over the selected steps with the same cumulative alpha_bar."""
    ab = s.alpha_bar[indices]
    prev = np.concatenate([[1.0], ab[:-1]])
    return schedule_from_betas(1.0 - ab / prev)


def sample(
    model,
    cfg: DiffusionConfig,
    n: int,
    shape,
    seed: int,
    chains: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> np.ndarray:
    """Generate ``n`` images of ``shape`` (C, H, W), clamped to [-1, 1].

    Each chain draws from its own generator keyed by its global index, so
    any split of chains over ``workers`` gives bit-identical images.
    """
    if n < 1:
        raise ContractError(f"need at least one sample, got n={n}")
    chains = list(range(n)) if chains is None else list(chains)
    if len(chains) != n:
        raise ContractError("chains must list one index per sample")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        groups = [g for g in np.array_split(np.array(chains), workers) if g.size]
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            parts = pool.map(lambda g: sample(model, cfg, g.size, shape, seed, list(g)), groups)
            return np.concatenate(list(parts))

    s = cfg.schedule
    idx = step_indices(s.T, cfg.sample_steps)
    sub = respaced_schedule(s, idx)
    x = batch_noise(seed, 0, chains, tuple(shape), stream=_INIT_STREAM)
    for k in reversed(range(idx.size)):
        t = int(idx[k])
        eps = batch_noise(seed, t, chains, tuple(shape))
        if cfg.sampler_rule == "ddpm_ancestral":
            x = reverse_step_ddpm(x, k, model, eps, sub, cfg.prediction_target, model_t=t)
        else:
            x = reverse_step_paper(x, t, model, eps, s, cfg.eq1_coefficient)
        if not np.isfinite(x).all():
            raise NumericFault(f"non-finite sample values after step t={t}")
    return np.clip(x, -1.0, 1.0)
