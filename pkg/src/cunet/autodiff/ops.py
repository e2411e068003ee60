"""Differentiable primitives.

Every primitive is a pure function of its inputs. When a tape is active and
an input requires a gradient, the primitive records its vector-Jacobian
product together with a forward closure that the tape can replay.

FLOP accounting: each primitive reports its cost through
:func:`~cunet.autodiff.tensor.charge` using the conventions below
(multiply-add = 2 FLOPs, costs per batch element times N):

=============== ==========================================
conv2d          2*Co*Ci*k*k*Ho*Wo + Co*Ho*Wo
linear          2*Dout*Din + Dout (per row)
group_norm      8*C*H*W
silu            4*C*H*W
attention       2*(HW)^2*C + 8*HW*C^2
upsample        0
elementwise     1 per output element
=============== ==========================================
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NumericFault, ShapeError
from .tensor import Tensor, as_tensor, charge, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    charge("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        np.add,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    charge("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return record(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        np.subtract,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    charge("elementwise", out.size)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record("mul", (a, b), out, vjp, np.multiply)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    charge("elementwise", out.size)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return record("div", (a, b), out, vjp, np.divide)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) elementwise."""

    def fwd(xd):
        return xd * (0.5 * (1.0 + np.tanh(0.5 * xd)))

    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    out = xd * sig
    charge("silu", 4 * out.size)
    return record("silu", (x,), out, lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), fwd)


# ------------------------------------------------------------------ structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return record(
        "reshape", (x,), x.data.reshape(shape),
        lambda g: (g.reshape(src),),
        lambda xd: xd.reshape(shape),
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return record("concat", tensors, out, vjp, lambda *ds: np.concatenate(ds, axis=axis))


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return record("slice", (x,), x.data[idx], vjp, lambda xd: xd[idx])


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    charge("elementwise", x.size)
    src = x.shape
    return record(
        "sum", (x,), np.asarray(x.data.sum()),
        lambda g: (np.broadcast_to(g, src).copy(),),
        lambda xd: np.asarray(xd.sum()),
    )


def mean(x: Tensor) -> Tensor:
    charge("elementwise", x.size)
    src, n = x.shape, x.size
    return record(
        "mean", (x,), np.asarray(x.data.mean()),
        lambda g: (np.broadcast_to(g / n, src).copy(),),
        lambda xd: np.asarray(xd.mean()),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]@[k,n], got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    charge("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data
    return record("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g), np.matmul)


# ------------------------------------------------------------------- network

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map ``x @ w.T + b`` for x of shape [N, Din]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"linear: x {x.shape}, W {w.shape}, b {b.shape}; need x[N,Din], W[Dout,Din], b[Dout]"
        )
    n, d_in = x.shape
    d_out = w.shape[0]
    charge("linear", n * (2 * d_out * d_in + d_out))

    def fwd(xd, wd, bd):
        return xd @ wd.T + bd

    xd, wd = x.data, w.data
    return record(
        "linear", (x, w, b), fwd(xd, wd, b.data),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
        fwd,
    )


def _conv_out(size: int, k: int, stride: int, padding: int, strict: bool, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel {k} larger than padded {dim} {size + 2 * padding}")
    if strict and span % stride:
        raise ShapeError(
            f"conv2d: {dim}={size} with k={k}, padding={padding} is not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # [N, Ho, Wo, C, k, k] -> rows are output positions
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col_matmul(col, wdat, bd, n, ho, wo):
    # one GEMM per sample, so a sample's output never depends on batch size
    co = wdat.shape[0]
    out = np.matmul(col.reshape(n, ho * wo, -1), wdat.reshape(co, -1).T) + bd
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)


def _flat_cols(xd: np.ndarray, k: int, padding: int) -> np.ndarray:
    """Stride-1 columns over a padded-width output grid.

    With the padded image flattened row-major, the tap (i, j) of every output
    position is one contiguous run starting at i*Wp + j. The grid is ho x Wp;
    its last Wp - wo columns are junk and are dropped after the GEMM. Layout
    [N, C*k*k, ho*Wp].
    """
    n, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = hp - k + 1
    run = ho * wp
    # one spare row keeps the last shifted run in bounds
    flat = np.zeros((n, c, hp + 1, wp))
    flat[:, :, padding:padding + h, padding:padding + w] = xd
    flat = flat.reshape(n, c, -1)
    col = np.empty((n, c, k, k, run))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            col[:, :, i, j] = flat[:, :, off:off + run]
    return col.reshape(n, c * k * k, run)


def conv2d(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0, strict: bool = False
) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: [N, Cin, H, W], w: [Cout, Cin, k, k] (k odd), b: [Cout].
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,k,k], got {w.shape}")
    co, ci, k, _ = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, wd = x.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has C_in={c} but kernel expects C_in={ci}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d: bias must be [{co}], got {b.shape}")
    if not np.isfinite(x.data).all():
        raise NumericFault(f"conv2d: non-finite input of shape {x.shape}")
    ho = _conv_out(h, k, stride, padding, strict, "H")
    wo = _conv_out(wd, k, stride, padding, strict, "W")
    charge("conv2d", n * (2 * co * ci * k * k * ho * wo + co * ho * wo))

    if k > 1 and stride == 1:
        return _conv2d_flat(x, w, b, padding, n, ci, co, k, h, wd, ho, wo)

    def pad(xd):
        if not padding:
            return xd
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + wd] = xd
        return xp

    def fwd(xd, wdat, bd):
        xp = pad(xd)
        if k == 1 and stride == 1 and padding == 0:
            out = np.matmul(wdat.reshape(co, ci), xp.reshape(n, ci, ho * wo))
            return out.reshape(n, co, ho, wo) + bd[None, :, None, None]
        return _col_matmul(_im2col(xp, k, stride, ho, wo), wdat, bd, n, ho, wo)

    xp = pad(x.data)
    wdat = w.data
    if k == 1 and stride == 1 and padding == 0:
        col = None
        out = fwd(x.data, wdat, b.data)
    else:
        col = _im2col(xp, k, stride, ho, wo)
        out = _col_matmul(col, wdat, b.data, n, ho, wo)

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3))
        if col is None:
            g2 = g.reshape(n, co, ho * wo)
            gw = np.einsum("nop,nip->oi", g2, xp.reshape(n, ci, ho * wo)).reshape(co, ci, 1, 1)
            gx = np.matmul(wdat.reshape(co, ci).T, g2).reshape(n, ci, h, wd)
            return gx, gw, gb
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ col).reshape(co, ci, k, k)
        # col2im: one GEMM for the column gradients, then k*k shifted adds
        gcol = (g2 @ wdat.reshape(co, -1)).reshape(n, ho, wo, ci, k, k).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[:, :, i, j]
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gxp, gw, gb

    return record("conv2d", (x, w, b), out, vjp, fwd)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"group_norm: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: C={c} is not divisible by groups={groups}")
    if eps <= 0:
        raise ConfigError(f"group_norm: eps must be positive, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must be [{c}], got {gamma.shape}, {beta.shape}")
    charge("group_norm", 8 * x.size)

    def normalize(xd):
        xg = xd.reshape(n, groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return ((xg - mu) * inv).reshape(n, c, h, w), inv

    def fwd(xd, gd, bd):
        xhat, _ = normalize(xd)
        return xhat * gd[None, :, None, None] + bd[None, :, None, None]

    xhat, inv = normalize(x.data)
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = (g * gd[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xh * (gxhat * xh).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return record("group_norm", (x, gamma, beta), out, vjp, fwd)


def spatial_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head self-attention over spatial positions with a residual add.

    Tokens are the H*W positions with C features; scores are scaled by
    1/sqrt(C). Returns ``x + Wo @ softmax(Q K^T / sqrt(C)) V``.
    """
    if x.ndim != 4:
        raise ShapeError(f"spatial_attention: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    for nm, m in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if m.shape != (c, c):
            raise ShapeError(f"spatial_attention: {nm} must be [{c},{c}], got {m.shape}")
    length = h * w
    charge("attention", n * (2 * length * length * c + 8 * length * c * c))
    scale = 1.0 / np.sqrt(c)

    def parts(xd, q_w, k_w, v_w, o_w):
        tok = xd.reshape(n, c, length).transpose(0, 2, 1)  # [N, L, C]
        q = tok @ q_w.T
        kk = tok @ k_w.T
        v = tok @ v_w.T
        s = (q @ kk.transpose(0, 2, 1)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        o = a @ v
        y = o @ o_w.T
        out = xd + y.transpose(0, 2, 1).reshape(n, c, h, w)
        return out, (tok, q, kk, v, a, o)

    def fwd(*ds):
        return parts(*ds)[0]

    out, (tok, q, kk, v, a, o) = parts(x.data, wq.data, wk.data, wv.data, wo.data)
    q_w, k_w, v_w, o_w = wq.data, wk.data, wv.data, wo.data

    def vjp(g):
        gy = g.reshape(n, c, length).transpose(0, 2, 1)  # [N, L, C]
        gwo = np.einsum("nlc,nld->cd", gy, o)
        go = gy @ o_w
        ga = go @ v.transpose(0, 2, 1)
        gv = a.transpose(0, 2, 1) @ go
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kk
        gk = gs.transpose(0, 2, 1) @ q
        gwq = np.einsum("nlc,nld->cd", gq, tok)
        gwk = np.einsum("nlc,nld->cd", gk, tok)
        gwv = np.einsum("nlc,nld->cd", gv, tok)
        gtok = gq @ q_w + gk @ k_w + gv @ v_w
        gx = g + gtok.transpose(0, 2, 1).reshape(n, c, h, w)
        return gx, gwq, gwk, gwv, gwo

    return record("attention", (x, wq, wk, wv, wo), out, vjp, fwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape

    def fwd(xd):
        return np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)

    return record(
        "upsample", (x,), fwd(x.data),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
        fwd,
    )


def avg_pool(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool: {h}x{w} not divisible by {factor}")
    charge("elementwise", x.size)

    def fwd(xd):
        return xd.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    f2 = factor * factor
    return record(
        "avg_pool", (x,), fwd(x.data),
        lambda g: (np.repeat(np.repeat(g / f2, factor, axis=2), factor, axis=3),),
        fwd,
    )


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def _flat_conv(xd: np.ndarray, wdat: np.ndarray, padding: int, col=None) -> np.ndarray:
    """Bias-free stride-1 conv via _flat_cols; ``col`` reuses precomputed columns."""
    n, _, h, w = xd.shape
    co, _, k, _ = wdat.shape
    wp = w + 2 * padding
    ho, wo = h + 2 * padding - k + 1, wp - k + 1
    if col is None:
        col = _flat_cols(xd, k, padding)
    # (Cout, K) @ (N, K, L) runs one GEMM per sample
    return np.matmul(wdat.reshape(co, -1), col).reshape(n, co, ho, wp)[:, :, :, :wo]


def _conv2d_flat(x, w, b, padding, n, ci, co, k, h, wd, ho, wo) -> Tensor:
    wp = wd + 2 * padding
    run = ho * wp

    def fwd(xd, wdat, bd):
        return _flat_conv(xd, wdat, padding) + bd[None, :, None, None]

    col = _flat_cols(x.data, k, padding)
    wdat = w.data
    out = _flat_conv(x.data, wdat, padding, col) + b.data[None, :, None, None]

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = np.zeros((n, co, ho, wp))
        gg[:, :, :, :wo] = g
        gw = np.matmul(col, gg.reshape(n, co, run).transpose(0, 2, 1)).sum(axis=0).T.reshape(co, ci, k, k)
        if padding <= k - 1:
            # input gradient is the full correlation of g with the flipped kernel
            wflip = wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _flat_conv(g, wflip, k - 1 - padding)
            return gx, gw, gb
        gcol = np.matmul(wdat.reshape(co, -1).T, gg.reshape(n, co, run)).reshape(n, ci, k, k, run)
        hp = h + 2 * padding
        gflat = np.zeros((n, ci, (hp + 1) * wp))
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                gflat[:, :, off:off + run] += gcol[:, :, i, j]
        gx = gflat.reshape(n, ci, hp + 1, wp)[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw, gb

    return record("conv2d", (x, w, b), out, vjp, fwd)
