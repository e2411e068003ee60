"""Independent oracles shared by the test modules.

Nothing here calls into the code under test except through the public
function being checked.
"""

import math

import numpy as np

from cunet.autodiff import Tape, Tensor, backward

FD_STEP = 1e-5
# Whole-network losses sum many O(1) terms, so round-off in a central
# difference grows like eps*|loss|/h; a larger step keeps it below the floor.
MODEL_FD_STEP = 1e-4
FD_RTOL = 1e-4
# Components whose true gradient is this small are compared absolutely.
FD_FLOOR = 1e-6


def numeric_grad(fn, arrays, name, index, h=FD_STEP):
    """Central difference of scalar ``fn(arrays)`` w.r.t. one component."""
    a = arrays[name]
    orig = a[index]
    a[index] = orig + h
    fp = fn(arrays)
    a[index] = orig - h
    fm = fn(arrays)
    a[index] = orig
    return (fp - fm) / (2 * h)


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_FLOOR)


def gradcheck(build, arrays, rng=None, max_components=None):
    """Compare tape gradients of ``build(tensors) -> scalar Tensor`` with FD.

    ``arrays`` maps names to float64 arrays; each becomes a grad-requiring
    Tensor. Returns the worst per-component relative error.
    """

    def value(arrs):
        ts = {k: Tensor(v) for k, v in arrs.items()}
        return build(ts).item()

    ts = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape() as tape:
        loss = build(ts)
    backward(tape, loss)
    work = {k: v.copy() for k, v in arrays.items()}
    worst = 0.0
    for name, t in ts.items():
        g = tape.grad_of(t)
        indices = list(np.ndindex(t.shape))
        if max_components is not None and len(indices) > max_components:
            pick = rng.choice(len(indices), size=max_components, replace=False)
            indices = [indices[i] for i in pick]
        for idx in indices:
            num = numeric_grad(value, work, name, idx)
            worst = max(worst, rel_err(g[idx], num))
    return worst


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[s, ci, y, xx] * w[o, ci, di, dj]
                    out[s, o, i, j] = acc
    return out


def linear_loops(x, w, b):
    n, d_in = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out))
    for r in range(n):
        for o in range(d_out):
            out[r, o] = b[o] + math.fsum(x[r, i] * w[o, i] for i in range(d_in))
    return out


def attention_loops(x, wq, wk, wv, wo):
    n, c, h, w = x.shape
    out = x.copy()
    positions = [(i, j) for i in range(h) for j in range(w)]
    for s in range(n):
        tok = [x[s, :, i, j] for i, j in positions]
        q = [wq @ t for t in tok]
        k = [wk @ t for t in tok]
        v = [wv @ t for t in tok]
        for a, (i, j) in enumerate(positions):
            scores = [float(q[a] @ k[b]) / math.sqrt(c) for b in range(len(tok))]
            m = max(scores)
            e = [math.exp(sc - m) for sc in scores]
            z = sum(e)
            mix = sum((e[b] / z) * v[b] for b in range(len(tok)))
            out[s, :, i, j] += wo @ mix
    return out


def tiny_cunet(**kw):
    from cunet.models import CUNetConfig
    from cunet.ode import SolverConfig

    base = dict(
        in_channels=1,
        base_channels=4,
        channel_mults=(1, 2),
        time_embed_dim=8,
        film_hidden=6,
        hidden_ratio=0.5,
        solver=SolverConfig(method="rk4", fixed_steps=1),
    )
    base.update(kw)
    return CUNetConfig(**base)


def tiny_unet(**kw):
    from cunet.models import UNetConfig

    base = dict(in_channels=1, base_channels=4, channel_mults=(1, 2), res_blocks_per_level=1, time_embed_dim=8)
    base.update(kw)
    return UNetConfig(**base)


def randomize(store, names, seed, scale=0.5):
    """Overwrite the named parameters with Gaussian noise (in place)."""
    rng = np.random.default_rng(seed)
    for n in names:
        t = store[n]
        t.data[...] = scale * rng.normal(size=t.shape)
