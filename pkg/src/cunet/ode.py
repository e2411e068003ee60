"""Explicit Runge-Kutta integration with exact derivative-call accounting.

States may be floats, numpy arrays, :class:`~cunet.autodiff.Tensor` objects
or :class:`OdeState` pairs; the solvers only use ``+`` and scalar ``*``.
With Tensor states and an active tape every stage is recorded, so gradients
are those of the discretised trajectory (discretise-then-optimise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff.tensor import Tape, Tensor, active_tape, cost_scope
from .errors import ConfigError, NumericFault, ShapeError, SolverFailure

FIXED_METHODS = {"euler": 1, "heun": 2, "rk4": 4}
METHODS = tuple(FIXED_METHODS) + ("dopri5",)


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    t0: float = 0.0
    t1: float = 1.0
    fixed_steps: int = 2
    rtol: float = 1e-4
    atol: float = 1e-4
    max_steps: int = 10_000
    min_step: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if not self.t1 > self.t0:
            raise ConfigError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        if self.fixed_steps < 1:
            raise ConfigError(f"fixed_steps must be >= 1, got {self.fixed_steps}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("rtol and atol must be positive")
        if self.max_steps < 1 or self.min_step <= 0:
            raise ConfigError("max_steps and min_step must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method == "dopri5"

    @property
    def nfe_per_solve(self) -> int:
        """Derivative calls for one fixed-step solve."""
        if self.adaptive:
            raise ConfigError("NFE of an adaptive solve is data dependent")
        return FIXED_METHODS[self.method] * self.fixed_steps


class OdeState:
    """Position/velocity pair for second-order systems."""

    __slots__ = ("x", "v")

    def __init__(self, x, v):
        if np.shape(_data(x)) != np.shape(_data(v)):
            raise ShapeError(f"OdeState: x shape {np.shape(_data(x))} != v shape {np.shape(_data(v))}")
        self.x = x
        self.v = v

    def __add__(self, other: "OdeState") -> "OdeState":
        return OdeState(self.x + other.x, self.v + other.v)

    def __mul__(self, c: float) -> "OdeState":
        return OdeState(self.x * c, self.v * c)

    __rmul__ = __mul__

    def __iter__(self):
        yield self.x
        yield self.v


class NfeCounter:
    """Running tally of derivative calls; may be shared across solves."""

    def __init__(self):
        self.evaluations = 0

    def wrap(self, f: Callable) -> Callable:
        def counted(t, z):
            self.evaluations += 1
            dz = f(t, z)
            if not _finite(dz):
                raise NumericFault(f"derivative returned non-finite values at t={t:.6g}")
            return dz

        return counted


def _data(z):
    return z.data if isinstance(z, Tensor) else z


def _leaves(z):
    if isinstance(z, OdeState):
        return [np.asarray(_data(z.x)), np.asarray(_data(z.v))]
    return [np.asarray(_data(z))]


def _finite(z) -> bool:
    return all(np.isfinite(a).all() for a in _leaves(z))


def _combine(z, h: float, coeffs, ks):
    """z + h * sum(c_i k_i), skipping zero coefficients."""
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = k * (h * c)
        acc = term if acc is None else acc + term
    return z if acc is None else z + acc


# Butcher tableaux (a rows, b weights, c nodes).
_TABLEAUX = {
    "euler": ([[]], [1.0], [0.0]),
    "heun": ([[], [1.0]], [0.5, 0.5], [0.0, 1.0]),
    "rk4": (
        [[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
        [1 / 6, 1 / 3, 1 / 3, 1 / 6],
        [0.0, 0.5, 0.5, 1.0],
    ),
}

_DP_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_DP_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
_DP_E = [b5 - b4 for b5, b4 in zip(_DP_B, _DP_B4)]


def _fixed_step(f, t, z, h, method):
    a, b, c = _TABLEAUX[method]
    ks = []
    for i in range(len(b)):
        zi = _combine(z, h, a[i], ks) if i else z
        ks.append(f(t + c[i] * h, zi))
    return _combine(z, h, b, ks)


def _rms(arrays) -> float:
    total = sum(float(np.sum(a * a)) for a in arrays)
    count = sum(a.size for a in arrays)
    return float(np.sqrt(total / max(count, 1)))


def _dopri5(f, z0, cfg: SolverConfig):
    t, t1 = cfg.t0, cfg.t1
    z = z0
    k1 = f(t, z)
    scale0 = [cfg.atol + cfg.rtol * np.abs(a) for a in _leaves(z)]
    d0 = _rms([a / s for a, s in zip(_leaves(z), scale0)])
    d1 = _rms([a / s for a, s in zip(_leaves(k1), scale0)])
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(h, t1 - t)
    steps = 0
    while t < t1:
        if steps >= cfg.max_steps:
            raise SolverFailure(f"dopri5 exceeded max_steps={cfg.max_steps}", t)
        if h < cfg.min_step:
            raise SolverFailure(f"dopri5 step size {h:.3g} fell below min_step={cfg.min_step}", t)
        last = t + h >= t1
        if last:
            h = t1 - t
        ks = [k1]
        for i in range(1, 7):
            ks.append(f(t + _DP_C[i] * h, _combine(z, h, _DP_A[i], ks)))
        z_new = _combine(z, h, _DP_B, ks)
        err = _combine(0.0 * _leaves_like(z), h, _DP_E, [_leaves_like(k) for k in ks])
        scale = [
            cfg.atol + cfg.rtol * np.maximum(np.abs(a), np.abs(b))
            for a, b in zip(_leaves(z), _leaves(z_new))
        ]
        err_norm = _rms([e / s for e, s in zip(err, scale)])
        steps += 1
        if err_norm <= 1.0:
            t = t1 if last else t + h
            z = z_new
            k1 = ks[6]  # first-same-as-last
        factor = 10.0 if err_norm == 0 else min(10.0, max(0.2, 0.9 * err_norm ** -0.2))
        h = h * factor
    return z


class _LeafList(list):
    """Plain-array view of a state used for the embedded error estimate."""

    def __add__(self, other):
        return _LeafList(a + b for a, b in zip(self, other))

    def __mul__(self, c):
        return _LeafList(a * c for a in self)

    __rmul__ = __mul__


def _leaves_like(z) -> _LeafList:
    return _LeafList(np.asarray(a, dtype=float) for a in _leaves(z))


def integrate(f: Callable, z0, config: SolverConfig, counter: Optional[NfeCounter] = None):
    """Integrate dz/dt = f(t, z) from config.t0 to config.t1.

    Returns ``(z1, nfe)`` where nfe is the exact number of f calls:
    steps for euler, 2*steps for heun, 4*steps for rk4 and 1 + 6 per
    attempted (accepted or rejected) step for dopri5.
    """
    counter = counter if counter is not None else NfeCounter()
    start = counter.evaluations
    fc = counter.wrap(f)
    with cost_scope("ode"):
        if config.adaptive:
            z1 = _dopri5(fc, z0, config)
        else:
            h = (config.t1 - config.t0) / config.fixed_steps
            z = z0
            for i in range(config.fixed_steps):
                z = _fixed_step(fc, config.t0 + i * h, z, h, config.method)
            z1 = z
    return z1, counter.evaluations - start


def integrate_differentiable(
    f: Callable,
    z0,
    config: SolverConfig,
    tape: Optional[Tape] = None,
    counter: Optional[NfeCounter] = None,
):
    """Fixed-step integrate with every stage recorded on ``tape``."""
    if config.adaptive:
        raise ConfigError("differentiable solves need a fixed-step method (euler, heun, rk4)")
    if tape is None or active_tape() is tape:
        return integrate(f, z0, config, counter)
    with tape:
        return integrate(f, z0, config, counter)


def solve_second_order(
    f_a: Callable,
    g: Callable,
    x0,
    config: SolverConfig,
    context=None,
    counter: Optional[NfeCounter] = None,
):
    """Solve x'' = f_a(x, x', t, context) with x(t0) = x0, x'(t0) = g(x0).

    The system is integrated in first-order form d(x, v)/dt = (v, f_a) and
    ``(x(t1), nfe)`` is returned.
    """
    v0 = g(x0)

    def aug(t, s: OdeState) -> OdeState:
        return OdeState(s.v, f_a(s.x, s.v, t, context))

    s1, nfe = integrate(aug, OdeState(x0, v0), config, counter)
    return s1.x, nfe
