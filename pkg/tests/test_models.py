import math

import numpy as np
import pytest

from cunet.autodiff import ParamStore, Tape, Tensor, backward, no_tape, ops
from cunet.errors import ConfigError, ShapeError
from cunet.models import (
    ABLATIONS,
    CUNetConfig,
    UNetConfig,
    block_names,
    cunet_forward,
    derivative_fn,
    dynamic_block_forward,
    film_modulation,
    forward,
    init_params,
    sinusoidal_time_embedding,
    unet_forward,
)
from cunet.models.layers import time_embedding
from cunet.ode import NfeCounter, SolverConfig

from helpers import FD_RTOL, MODEL_FD_STEP, rel_err, randomize, tiny_cunet, tiny_unet


# ------------------------------------------------------------- embedding

def test_embedding_t0():
    e = sinusoidal_time_embedding(0, 10).data
    assert np.array_equal(e[:5], np.zeros(5))
    assert np.array_equal(e[5:], np.ones(5))


@pytest.mark.parametrize("t", [0, 1, 7, 499, 999])
def test_embedding_pythagorean(t):
    e = sinusoidal_time_embedding(t, 16).data
    np.testing.assert_allclose(e[:8] ** 2 + e[8:] ** 2, 1.0, atol=1e-15)


def test_embedding_dim4_closed_form():
    e = sinusoidal_time_embedding(1, 4).data
    ref = [math.sin(1.0), math.sin(1e-4), math.cos(1.0), math.cos(1e-4)]
    np.testing.assert_allclose(e, ref, rtol=0, atol=1e-12)


def test_embedding_batch_rows():
    e = sinusoidal_time_embedding(np.array([3, 5]), 6).data
    assert e.shape == (2, 6)
    assert np.array_equal(e[1], sinusoidal_time_embedding(5, 6).data)


@pytest.mark.parametrize("dim", [0, 3, 7])
def test_embedding_odd_dim(dim):
    with pytest.raises(ConfigError):
        sinusoidal_time_embedding(1, dim)


# ------------------------------------------------------------------ FiLM

def _film_layers(rng, e, c, zero=False):
    w = np.zeros((2 * c, e)) if zero else rng.normal(size=(2 * c, e))
    b = np.zeros(2 * c) if zero else rng.normal(size=2 * c)
    return [(Tensor(w), Tensor(b))]


def test_film_zero_mlp_identity():
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(2, 3, 4, 4)))
    out = film_modulation(h, Tensor(rng.normal(size=5)), _film_layers(rng, 5, 3, zero=True))
    assert np.array_equal(out.data, h.data)


def test_film_unit_scale_doubles():
    rng = np.random.default_rng(1)
    h = Tensor(rng.normal(size=(2, 3, 4, 4)))
    w = np.zeros((6, 5))
    b = np.concatenate([np.ones(3), np.zeros(3)])
    out = film_modulation(h, Tensor(rng.normal(size=5)), [(Tensor(w), Tensor(b))])
    np.testing.assert_array_equal(out.data, 2 * h.data)


def test_film_loop_oracle():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(2, 3, 4, 5))
    emb = rng.normal(size=7)
    layers = _film_layers(rng, 7, 3)
    out = film_modulation(Tensor(h), Tensor(emb), layers).data
    w, b = layers[0][0].data, layers[0][1].data
    act = emb / (1 + np.exp(-emb))
    mod = [b[o] + math.fsum(w[o, i] * act[i] for i in range(7)) for o in range(6)]
    ref = np.empty_like(h)
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    ref[n, c, i, j] = h[n, c, i, j] * (1 + mod[c]) + mod[3 + c]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_film_dim_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ConfigError):
        film_modulation(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones(5)), _film_layers(rng, 5, 3))
    with pytest.raises(ConfigError):
        film_modulation(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(4)), _film_layers(rng, 5, 3))


# ------------------------------------------------------- dynamic blocks

def _block_store(cfg, seed=0):
    return init_params(cfg, seed)


def _zero(store, prefix):
    for n in store.names(prefix):
        store[n].data[...] = 0.0


def _film(store, prefix, temb):
    from cunet.models.layers import film_coefficients, linear_pair

    h = store[prefix + ".f.conv1.w"].shape[0]
    return film_coefficients(temb, [linear_pair(store, prefix + ".film.0"), linear_pair(store, prefix + ".film.1")], h)


def test_derivative_zero_weights_is_zero():
    cfg = tiny_cunet(use_residual=False)
    store = _block_store(cfg)
    for n in store.names("block_1.f."):
        if n.endswith(".w") or n.endswith(".b"):
            store[n].data[...] = 0.0
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    v = Tensor(rng.normal(size=(2, 4, 4, 4)))
    temb = time_embedding(store, 3, cfg.time_embed_dim)
    a = derivative_fn(x, v, 0.3, _film(store, "block_1", temb), store, "block_1", False)
    assert np.array_equal(a.data, np.zeros_like(x.data))


def test_derivative_residual_identity_path():
    cfg = tiny_cunet()
    store = _block_store(cfg)
    for n in store.names("block_1.f."):
        if n.endswith(".w") or n.endswith(".b"):
            store[n].data[...] = 0.0
    store["block_1.f.res.w"].data[:, :, 0, 0] = np.eye(4)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    v = Tensor(rng.normal(size=(2, 4, 4, 4)))
    temb = time_embedding(store, 3, cfg.time_embed_dim)
    a = derivative_fn(x, v, 0.7, _film(store, "block_1", temb), store, "block_1", True)
    np.testing.assert_array_equal(a.data, x.data)


@pytest.mark.parametrize("seed", range(10))
def test_derivative_shape_contract(seed):
    rng = np.random.default_rng(seed)
    base = int(rng.integers(2, 6))
    cfg = tiny_cunet(base_channels=base, hidden_ratio=float(rng.choice([0.25, 0.5, 1.0])))
    store = _block_store(cfg, seed)
    hw = int(rng.choice([2, 4, 6]))
    n = int(rng.integers(1, 4))
    x = Tensor(rng.normal(size=(n, base, hw, hw)))
    v = Tensor(rng.normal(size=(n, base, hw, hw)))
    temb = time_embedding(store, int(rng.integers(0, 100)), cfg.time_embed_dim)
    name = block_names(cfg)[0]
    a = derivative_fn(x, v, float(rng.uniform()), _film(store, name, temb), store, name, bool(seed % 2))
    assert a.shape == x.shape


def test_derivative_shape_mismatch():
    cfg = tiny_cunet()
    store = _block_store(cfg)
    temb = time_embedding(store, 0, cfg.time_embed_dim)
    with pytest.raises(ShapeError):
        derivative_fn(
            Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 4, 2, 2))), 0.0,
            _film(store, "block_1", temb), store, "block_1", True,
        )


@pytest.mark.parametrize("method", ["euler", "heun", "rk4", "dopri5"])
def test_identity_block(method):
    cfg = tiny_cunet(solver=SolverConfig(method=method, fixed_steps=2))
    store = _block_store(cfg)
    for prefix in ("block_1.f.", "block_1.g."):
        _zero(store, prefix)
    x0 = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 4)))
    temb = time_embedding(store, 10, cfg.time_embed_dim)
    out = dynamic_block_forward(x0, temb, store, "block_1", cfg)
    assert np.array_equal(out.data, x0.data)


def test_block_constant_velocity():
    cfg = tiny_cunet()
    store = _block_store(cfg)
    _zero(store, "block_1.f.")
    _zero(store, "block_1.g.")
    c = np.array([0.5, -1.0, 2.0, 0.25])
    store["block_1.g.b"].data[...] = c
    x0 = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 4)))
    out = dynamic_block_forward(x0, time_embedding(store, 1, 8), store, "block_1", cfg)
    np.testing.assert_allclose(out.data, x0.data + c[None, :, None, None], rtol=0, atol=1e-14)


def test_block_gradient_wrt_g():
    cfg = tiny_cunet(solver=SolverConfig(method="rk4", fixed_steps=2))
    store = _block_store(cfg, 4)
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(2, 4, 4, 4))
    weights = rng.normal(size=x0.shape)

    def loss_value():
        with no_tape():
            temb = time_embedding(store, 5, 8)
            out = dynamic_block_forward(Tensor(x0), temb, store, "block_1", cfg)
        return float(np.sum(out.data * weights))

    with Tape() as tape:
        temb = time_embedding(store, 5, 8)
        out = dynamic_block_forward(Tensor(x0), temb, store, "block_1", cfg)
        loss = ops.sum(ops.mul(out, Tensor(weights)))
    grads = backward(tape, loss, store)
    h = 1e-5
    worst = 0.0
    for name in ("block_1.g.w", "block_1.g.b"):
        arr = store[name].data
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_value()
            arr[idx] = orig - h
            fm = loss_value()
            arr[idx] = orig
            worst = max(worst, rel_err(grads[name][idx], (fp - fm) / (2 * h)))
    assert worst < FD_RTOL


# ------------------------------------------------------------- full nets

@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
@pytest.mark.parametrize("hw,n", [(4, 1), (8, 3), (12, 2)])
def test_shape_preserved(make, hw, n):
    cfg = make()
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    x = Tensor(np.random.default_rng(2).normal(size=(n, 1, hw, hw)))
    assert forward(x, 3, store, cfg).shape == x.shape


@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
def test_forward_deterministic(make):
    cfg = make()
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 1, 8, 8)))
    a = forward(x, 17, store, cfg).data
    b = forward(x, 17, store, cfg).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
def test_zero_head_outputs_zero(make):
    cfg = make()
    store = init_params(cfg, 3)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 1, 8, 8)))
    assert np.array_equal(forward(x, 9, store, cfg).data, np.zeros(x.shape))


@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
def test_resolution_and_channel_checks(make):
    cfg = make()
    store = init_params(cfg, 0)
    with pytest.raises(ConfigError):
        forward(Tensor(np.zeros((1, 1, 5, 5))), 0, store, cfg)
    with pytest.raises(ShapeError):
        forward(Tensor(np.zeros((1, 3, 4, 4))), 0, store, cfg)


def test_per_sample_steps_match_single():
    cfg = tiny_cunet()
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    x = np.random.default_rng(2).normal(size=(2, 1, 4, 4))
    both = cunet_forward(Tensor(x), np.array([3, 40]), store, cfg).data
    first = cunet_forward(Tensor(x[:1]), 3, store, cfg).data
    second = cunet_forward(Tensor(x[1:]), 40, store, cfg).data
    np.testing.assert_allclose(both, np.concatenate([first, second]), rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "method,steps,per", [("euler", 3, 1), ("heun", 2, 2), ("rk4", 2, 4), ("rk4", 1, 4)]
)
def test_total_nfe(method, steps, per):
    cfg = tiny_cunet(solver=SolverConfig(method=method, fixed_steps=steps))
    store = init_params(cfg, 0)
    counter = NfeCounter()
    cunet_forward(Tensor(np.zeros((1, 1, 4, 4))), 0, store, cfg, counter=counter)
    assert cfg.blocks_K == 5
    assert counter.evaluations == cfg.blocks_K * per * steps


def test_block_names_and_prefixes():
    cfg = tiny_cunet()
    store = init_params(cfg, 0)
    names = block_names(cfg)
    assert names == [f"block_{k}" for k in range(1, 6)]
    for n in names:
        assert store.names(n + ".f.") and store.names(n + ".g.")
    assert not store.names("block_6.")


def test_compositionality_identity_replacement():
    cfg = tiny_cunet()
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 1, 4, 4)))
    base = {}
    cunet_forward(x, 11, store, cfg, trace=base)
    order = block_names(cfg)
    for k, target in enumerate(order):
        mod = store.copy()
        _zero(mod, target + ".f.")
        _zero(mod, target + ".g.")
        trace = {}
        cunet_forward(x, 11, mod, cfg, trace=trace)
        inp, out = trace[target]
        assert np.array_equal(inp, out)
        # upstream blocks are untouched
        for j in order[:k]:
            assert np.array_equal(trace[j][0], base[j][0])
            assert np.array_equal(trace[j][1], base[j][1])
        # every other block is still the same map of its own input
        temb = time_embedding(mod, 11, cfg.time_embed_dim)
        for j in order:
            if j == target:
                continue
            again = dynamic_block_forward(Tensor(trace[j][0]), temb, store, j, cfg)
            assert np.array_equal(again.data, trace[j][1])


def test_init_deterministic():
    for cfg in (tiny_cunet(), tiny_unet(), CUNetConfig(), UNetConfig()):
        a, b = init_params(cfg, 7), init_params(cfg, 7)
        assert list(a) == list(b)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)
        c = init_params(cfg, 8)
        assert any(not np.array_equal(a[n].data, c[n].data) for n in a if n.endswith(".w"))


def _block_count(c, h, e, f, resid):
    norm1 = 2 * (2 * c)
    conv1 = h * (2 * c + 1) * 9 + h
    norm2 = 2 * h
    conv2 = c * h * 9 + c
    res = c * c + c if resid else 0
    film = e * f + f + f * 2 * h + 2 * h
    g = c * c + c
    return norm1 + conv1 + norm2 + conv2 + res + film + g


@pytest.mark.parametrize("resid,att", [(True, True), (False, True), (True, False), (False, False)])
def test_cunet_hand_count(resid, att):
    cfg = tiny_cunet(use_residual=resid, use_attention=att)
    e, f = 8, 6
    # widths 4 and 8, hidden widths 2 and 4, blocks at [4, 8, 8, 8, 4]
    total = 2 * (e * e + e)  # time MLP
    total += 1 * 4 * 9 + 4  # stem
    total += 4 * 8 * 9 + 8  # down_1
    total += 2 * _block_count(4, 2, e, f, resid) + 3 * _block_count(8, 4, e, f, resid)
    total += 4 * 8 * 8 if att else 0
    total += (8 * 8 + 8) + (16 * 8 + 8)  # dec_1 proj, merge
    total += (8 * 4 + 4) + (8 * 4 + 4)  # dec_0 proj, merge
    total += 2 * 4 + (4 * 1 + 1)  # head
    assert init_params(cfg, 0).num_params() == total


def test_unet_hand_count():
    cfg = tiny_unet()
    e = 8

    def res(ci, co):
        skip = ci * co + co if ci != co else 0
        return 2 * ci + (co * ci * 9 + co) + (e * 2 * co + 2 * co) + 2 * co + (co * co * 9 + co) + skip

    attn = 4 * 8 * 8
    total = 2 * (e * e + e) + (4 * 9 + 4)
    total += res(4, 4) + (4 * 4 * 9 + 4)  # level 0 and its downsample
    total += res(4, 8) + attn  # level 1
    total += res(8, 8) + attn + res(8, 8)  # middle
    # skips popped: [4, 4, 4, 8] from the top
    total += res(16, 8) + attn + res(12, 8) + attn + (8 * 8 * 9 + 8)
    total += res(12, 4) + res(8, 4)
    total += 2 * 4 + (4 * 9 + 1)
    assert init_params(cfg, 0).num_params() == total


@pytest.mark.parametrize("cfg", [CUNetConfig(), tiny_cunet()], ids=["default", "tiny"])
def test_ablation_containment(cfg):
    counts = {a: init_params(cfg.ablation(a), 0).num_params() for a in ABLATIONS}
    assert counts["full"] > counts["wo/A"] > counts["wo/A/R"]
    assert counts["full"] > counts["wo/R"] > counts["wo/A/R"]


def test_default_ablation_strict_order():
    cfg = CUNetConfig()
    counts = [init_params(cfg.ablation(a), 0).num_params() for a in ABLATIONS]
    assert counts == sorted(counts, reverse=True) and len(set(counts)) == 4


def test_ablation_unknown():
    with pytest.raises(ConfigError):
        tiny_cunet().ablation("wo/X")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"channel_mults": (1,)},
        {"time_embed_dim": 7},
        {"stride_schedule": (1, 3)},
        {"stride_schedule": (2, 2)},
        {"stride_schedule": (1,)},
        {"blocks_K": 4},
        {"hidden_ratio": 0.0},
    ],
)
def test_cunet_config_errors(kwargs):
    with pytest.raises(ConfigError):
        tiny_cunet(**kwargs)


def test_stride_one_schedule():
    cfg = tiny_cunet(stride_schedule=(1, 1))
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5)))
    assert cunet_forward(x, 2, store, cfg).shape == x.shape


# ---------------------------------------------------- gradient sweeps

def _model_loss(cfg, store, x, t, weights):
    return ops.sum(ops.mul(forward(Tensor(x), t, store, cfg), Tensor(weights)))


def model_gradcheck(cfg, seed, components=12):
    """Worst relative error between tape and central-difference gradients."""
    rng = np.random.default_rng(seed)
    store = init_params(cfg, seed)
    randomize(store, store.names("head."), seed + 1000)
    x = rng.normal(size=(2, 1, 4, 4))
    t = rng.integers(0, 100, size=2)
    weights = rng.normal(size=x.shape)
    with Tape() as tape:
        loss = _model_loss(cfg, store, x, t, weights)
    grads = backward(tape, loss, store)
    names = list(store)
    worst = 0.0
    h = MODEL_FD_STEP
    for k in rng.choice(len(names), size=components, replace=False):
        name = names[k]
        arr = store[name].data
        idx = tuple(int(rng.integers(0, d)) for d in arr.shape)
        orig = arr[idx]
        vals = []
        for d in (h, -h):
            arr[idx] = orig + d
            with no_tape():
                vals.append(_model_loss(cfg, store, x, t, weights).item())
        arr[idx] = orig
        worst = max(worst, rel_err(grads[name][idx], (vals[0] - vals[1]) / (2 * h)))
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_cunet_gradcheck(seed):
    assert model_gradcheck(tiny_cunet(), seed) < FD_RTOL


@pytest.mark.parametrize("seed", range(20))
def test_unet_gradcheck(seed):
    assert model_gradcheck(tiny_unet(), seed) < FD_RTOL


@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
def test_dead_parameter_sweep(make):
    cfg = make()
    store = init_params(cfg, 0)
    randomize(store, store.names("head."), 1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 1, 4, 4))
    with Tape() as tape:
        loss = _model_loss(cfg, store, x, np.array([1, 50, 90]), rng.normal(size=x.shape))
    grads = backward(tape, loss, store)
    dead = [n for n, g in grads.items() if not np.any(g != 0)]
    assert dead == []


@pytest.mark.parametrize("make", [tiny_cunet, tiny_unet])
def test_zero_head_blocks_upstream_grads(make):
    cfg = make()
    store = init_params(cfg, 0)
    x = np.random.default_rng(2).normal(size=(2, 1, 4, 4))
    with Tape() as tape:
        loss = _model_loss(cfg, store, x, 4, np.ones(x.shape))
    grads = backward(tape, loss, store)
    live = {n for n, g in grads.items() if np.any(g != 0)}
    assert live <= {"head.conv.w", "head.conv.b"}
    assert "head.conv.b" in live
