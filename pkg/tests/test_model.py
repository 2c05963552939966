import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dust import tensor as T
from dust.model import (DustModel, ModelConfig, ParamStore, dit_tail_block, encode_inputs,
                        forward, is_zero_init, mmdit_block, param_count, param_shapes,
                        sincos_1d, sincos_2d, timestep_embedding)
from dust.rng import SeededRng
from dust.tensor import Tensor

SMALL = dict(d_model=8, n_heads=2, n_mmdit=2, n_dit=1, k=3, m=4, d_o=5, mlp_ratio=2)


def random_params(cfg, seed=0, scale=0.3):
    return ParamStore(cfg, scale * SeededRng(seed).normal(param_count(cfg)))


def inputs(cfg, B=2, seed=1):
    r = SeededRng(seed)
    return (r.normal((B, cfg.n_ctx, cfg.d_model)), r.normal((B, cfg.d_s)),
            r.normal((B, cfg.k, cfg.d_A)), r.normal((B, cfg.m, cfg.d_o)),
            r.uniform(B), r.uniform(B))


def run(cfg, params, args, mask_cross=False):
    va, vo = forward(params.tensors(), cfg, *args, mask_cross=mask_cross)
    return va.data, vo.data


# ---------------------------------------------------------------- config and layout

def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="perfect square"):
        ModelConfig(m=6)
    with pytest.raises(ValueError, match=">= 1"):
        ModelConfig(n_mmdit=0)
    with pytest.raises(ValueError, match="arch_mode"):
        ModelConfig(arch_mode="unet")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([8, 16, 24]), st.integers(1, 4), st.integers(0, 3), st.integers(1, 6),
       st.sampled_from([1, 4, 9]), st.sampled_from(["mmdit", "single_stream_dit"]),
       st.sampled_from(["interleaved", "all_self"]), st.integers(1, 4))
def test_param_count_closed_form(d, n_mmdit, n_dit, k, m, arch, pattern, ratio):
    cfg = ModelConfig(d_model=d, n_heads=2, n_mmdit=n_mmdit, n_dit=n_dit, k=k, m=m,
                      arch_mode=arch, attn_pattern=pattern, mlp_ratio=ratio)
    assert sum(math.prod(s) for _, s in param_shapes(cfg)) == param_count(cfg)
    assert ParamStore(cfg).size == param_count(cfg)


def test_param_count_desk_value():
    # hand count for the default config (d=32, h=128, 4 + 2 blocks per stream)
    d, h = 32, 128
    block = 6 * d * d + 6 * d + 4 * (d * d + d) + 2 * d * h + h + d
    temb = 2 * d * d + 2 * d
    enc = 3 * d + 3 * d + 9 * d + 2 * (d * d + d)
    dec = (d + 1) * 2 + d * d + d + (d + 1) * 8
    assert param_count(ModelConfig()) == temb + enc + 12 * block + dec


def test_init_zeroes_modulation_and_decoders_and_is_seeded():
    cfg = ModelConfig(**SMALL)
    a = DustModel.create(cfg, seed=3).params
    b = DustModel.create(cfg, seed=3).params
    assert np.array_equal(a.flat, b.flat)
    for name in a.names():
        if is_zero_init(name) or name.endswith(".b"):
            assert not a[name].any(), name
        else:
            assert a[name].any(), name
    assert not a.decay_mask[a.slices["mmdit0.a.mod.b"]].any()
    assert a.decay_mask[a.slices["mmdit0.a.mod.w"]].all()


def test_flat_views_share_memory():
    ps = ParamStore(ModelConfig(**SMALL))
    ps["dec_a.w"][0, 0] = 5.0
    assert ps.flat[ps.slices["dec_a.w"]][0] == 5.0


# ---------------------------------------------------------------- encoders

def test_position_codes_with_zero_projections():
    cfg = ModelConfig(**SMALL)
    P = ParamStore(cfg).tensors()  # all zeros
    B = 2
    xa, xo = encode_inputs(Tensor(np.zeros((B, 2))), Tensor(np.zeros((B, cfg.k, 2))),
                           Tensor(np.zeros((B, cfg.m, cfg.d_o))), P, cfg)
    assert np.array_equal(xa.data, np.broadcast_to(sincos_1d(1 + cfg.k, 8), (B, 1 + cfg.k, 8)))
    assert np.array_equal(xo.data, np.broadcast_to(sincos_2d(2, 8), (B, 4, 8)))


def test_sixteen_action_tokens_plus_state():
    cfg = ModelConfig(**{**SMALL, "k": 16})
    xa, _ = encode_inputs(*(Tensor(a) for a in inputs(cfg)[1:4]), random_params(cfg).tensors(),
                          cfg)
    assert xa.shape == (2, 17, 8)


def test_distinct_actions_give_distinct_tokens():
    cfg = ModelConfig(**SMALL)
    P = random_params(cfg).tensors()
    st_, act, fut = inputs(cfg)[1:4]
    act[:, 1] = act[:, 0] + 0.1
    xa, _ = encode_inputs(Tensor(st_), Tensor(act), Tensor(fut), P, cfg)
    assert not np.allclose(xa.data[:, 1] - sincos_1d(4, 8)[1], xa.data[:, 2] - sincos_1d(4, 8)[2])


def test_sincos_2d_layout():
    codes = sincos_2d(3, 8)
    assert codes.shape == (9, 8)
    # tokens in the same row share the first half; same column share the second
    assert np.array_equal(codes[0, :4], codes[2, :4])
    assert np.array_equal(codes[1, 4:], codes[4, 4:])


# ---------------------------------------------------------------- blocks

def _block_setup(cfg, seed=0, zero_mod=False):
    params = random_params(cfg, seed)
    if zero_mod:
        for n in params.names():
            if ".mod." in n:
                params[n][...] = 0.0
    P = params.tensors()
    r = SeededRng(seed + 100)
    xa, xo = Tensor(r.normal((2, 1 + cfg.k, cfg.d_model))), Tensor(r.normal((2, cfg.m, cfg.d_model)))
    ctx = Tensor(r.normal((2, cfg.n_ctx, cfg.d_model)))
    ea, eo = T.silu(timestep_embedding(r.uniform(2), P, cfg)), T.silu(
        timestep_embedding(r.uniform(2), P, cfg))
    return params, P, xa, xo, ctx, ea, eo


@pytest.mark.parametrize("layer", [0, 1])
def test_zero_gates_make_blocks_identity(layer):
    cfg = ModelConfig(**SMALL)
    _, P, xa, xo, ctx, ea, eo = _block_setup(cfg, zero_mod=True)
    ya, yo = mmdit_block(xa, xo, ctx, ea, eo, P, cfg, layer)
    assert np.array_equal(ya.data, xa.data) and np.array_equal(yo.data, xo.data)
    assert np.array_equal(dit_tail_block(xa, ctx, ea, P, cfg, "a", 0).data, xa.data)


def test_zero_gates_and_decoders_give_zero_velocity():
    cfg = ModelConfig(**SMALL)
    va, vo = DustModel.create(cfg)(*inputs(cfg))
    assert va.shape == (2, 3, 2) and vo.shape == (2, 4, 5)
    assert not va.any() and not vo.any()


def test_self_attention_permutation_equivariance():
    cfg = ModelConfig(**SMALL)
    _, P, xa, xo, ctx, ea, eo = _block_setup(cfg)
    perm = np.array([2, 0, 3, 1])
    ya, yo = mmdit_block(xa, xo, ctx, ea, eo, P, cfg, 0)
    pa, po = mmdit_block(xa, Tensor(xo.data[:, perm]), ctx, ea, eo, P, cfg, 0)
    np.testing.assert_allclose(po.data, yo.data[:, perm], rtol=0, atol=1e-13)
    np.testing.assert_allclose(pa.data, ya.data, rtol=0, atol=1e-13)


def test_full_model_permutes_with_position_codes():
    # permuting vision inputs together with their position codes permutes vision outputs
    cfg = ModelConfig(**{**SMALL, "attn_pattern": "all_self", "n_dit": 0})
    params = random_params(cfg, 4)
    ctx, st_, act, fut, ta, to = inputs(cfg)
    perm = np.array([3, 1, 0, 2])
    P = params.tensors()
    xa, xo = encode_inputs(Tensor(st_), Tensor(act), Tensor(fut), P, cfg)
    xo_p = Tensor(xo.data[:, perm])
    ea, eo = T.silu(timestep_embedding(ta, P, cfg)), T.silu(timestep_embedding(to, P, cfg))
    a1, o1, a2, o2 = xa, xo, xa, xo_p
    for i in range(cfg.n_mmdit):
        a1, o1 = mmdit_block(a1, o1, Tensor(ctx), ea, eo, P, cfg, i)
        a2, o2 = mmdit_block(a2, o2, Tensor(ctx), ea, eo, P, cfg, i)
    np.testing.assert_allclose(o2.data, o1.data[:, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a2.data, a1.data, rtol=0, atol=1e-12)


def test_per_modality_equals_global_with_shared_params():
    cfg = ModelConfig(**SMALL)
    params = random_params(cfg, 5)
    for n in params.names():
        if ".o." in n:
            params[n][...] = params[n.replace(".o.", ".a.")]
    ctx, st_, act, fut, ta, _ = inputs(cfg)
    args = (ctx, st_, act, fut, ta, ta)
    glob = ModelConfig(**{**SMALL, "adaln_mode": "global"})
    pm = run(cfg, params, args)
    gl = run(glob, ParamStore(glob, params.flat), args)
    for x, y in zip(pm, gl):
        assert np.array_equal(x, y)


def test_single_token_self_attention_is_value_path():
    cfg = ModelConfig(**{**SMALL, "k": 1, "m": 1})
    P = _block_setup(cfg)[1]
    x = Tensor(SeededRng(9).normal((2, 1, 8)))
    q, k, v = T.split(T.linear(x, P["mmdit0.a.qkv.w"], P["mmdit0.a.qkv.b"]), [8, 8, 8], axis=-1)
    np.testing.assert_allclose(T.attention(q, k, v, 2).data, v.data, rtol=0, atol=1e-15)


def test_tail_output_depends_on_embedding():
    cfg = ModelConfig(**SMALL)
    _, P, xa, _, ctx, ea, eo = _block_setup(cfg)
    assert not np.allclose(dit_tail_block(xa, ctx, ea, P, cfg, "a", 0).data,
                           dit_tail_block(xa, ctx, eo, P, cfg, "a", 0).data)


# ---------------------------------------------------------------- stream separation

def test_masked_cross_terms_isolate_action_stream():
    cfg = ModelConfig(**SMALL)
    params = random_params(cfg, 6)
    ctx, st_, act, fut, ta, to = inputs(cfg)
    a1, _ = run(cfg, params, (ctx, st_, act, fut, ta, to), mask_cross=True)
    a2, _ = run(cfg, params, (ctx, st_, act, np.zeros_like(fut), ta, to), mask_cross=True)
    assert np.array_equal(a1, a2)
    # without the mask, vision content reaches the action stream through joint attention
    b1, _ = run(cfg, params, (ctx, st_, act, fut, ta, to))
    b2, _ = run(cfg, params, (ctx, st_, act, np.zeros_like(fut), ta, to))
    assert not np.array_equal(b1, b2)


def test_tau_o_reaches_action_only_through_joint_attention():
    cfg = ModelConfig(**SMALL)
    params = random_params(cfg, 7)
    ctx, st_, act, fut, ta, _ = inputs(cfg)
    outs = [run(cfg, params, (ctx, st_, act, fut, ta, to), mask_cross=True) for to in (0.1, 0.8)]
    assert np.array_equal(outs[0][0], outs[1][0])
    assert not np.array_equal(outs[0][1], outs[1][1])


@pytest.mark.parametrize("arch", ["mmdit", "single_stream_dit"])
def test_mask_cross_also_separates_single_stream(arch):
    cfg = ModelConfig(**{**SMALL, "arch_mode": arch})
    params = random_params(cfg, 8)
    ctx, st_, act, fut, ta, to = inputs(cfg)
    a1, _ = run(cfg, params, (ctx, st_, act, fut, ta, to), mask_cross=True)
    a2, _ = run(cfg, params, (ctx, st_, act, 2 * fut, ta, to), mask_cross=True)
    assert np.array_equal(a1, a2)


# ---------------------------------------------------------------- forward contract

@pytest.mark.parametrize("over", [{}, {"arch_mode": "single_stream_dit"},
                                  {"adaln_mode": "global"}, {"attn_pattern": "all_self"},
                                  {"n_dit": 0}, {"m": 9, "k": 1}])
def test_forward_shapes_and_determinism(over):
    cfg = ModelConfig(**{**SMALL, **over})
    params = random_params(cfg, 10)
    args = inputs(cfg, B=3)
    va, vo = run(cfg, params, args)
    assert va.shape == (3, cfg.k, 2) and vo.shape == (3, cfg.m, cfg.d_o)
    va2, vo2 = run(cfg, params.copy(), args)
    assert np.array_equal(va, va2) and np.array_equal(vo, vo2)


def test_unbatched_inputs():
    cfg = ModelConfig(**SMALL)
    params = random_params(cfg, 11)
    ctx, st_, act, fut, ta, to = inputs(cfg, B=1)
    va, vo = forward(params.tensors(), cfg, ctx[0], st_[0], act[0], fut[0], ta[0], to[0])
    vb, vob = run(cfg, params, (ctx, st_, act, fut, ta, to))
    assert va.shape == (3, 2) and np.array_equal(va.data, vb[0])
    assert np.array_equal(vo.data, vob[0])


def test_forward_shape_errors():
    cfg = ModelConfig(**SMALL)
    ctx, st_, act, fut, ta, to = inputs(cfg)
    with pytest.raises(T.ShapeError, match="noisy_action"):
        forward(ParamStore(cfg).tensors(), cfg, ctx, st_, act[:, :2], fut, ta, to)


def test_model_call_builds_no_tape():
    cfg = ModelConfig(**SMALL)
    model = DustModel(cfg, random_params(cfg, 12))
    with T.recording() as tape:
        model(*inputs(cfg))
    assert len(tape) == 0


def test_context_receives_no_gradient_and_all_params_do():
    cfg = ModelConfig(**SMALL)
    params = random_params(cfg, 13)
    ctx, st_, act, fut, ta, to = inputs(cfg)
    with T.recording() as tape:
        P = params.watch(tape)
        va, vo = forward(P, cfg, ctx, st_, act, fut, ta, to)
        loss = T.add(T.mean(T.mul(va, va)), T.mean(T.mul(vo, vo)))
    g = T.gradients(loss, P)
    dead = [n for n, v in g.items() if not v.any()]
    assert dead == []


def test_cross_layer_is_the_same_in_stack_and_tail():
    # layer 1 is per-stream cross-attention either way, and the layouts line up
    a = ModelConfig(**{**SMALL, "n_mmdit": 2, "n_dit": 0})
    b = ModelConfig(**{**SMALL, "n_mmdit": 1, "n_dit": 1})
    assert [s for _, s in param_shapes(a)] == [s for _, s in param_shapes(b)]
    flat = 0.3 * SeededRng(12).normal(param_count(a))
    args = inputs(a, B=2)
    for x, y in zip(run(a, ParamStore(a, flat.copy()), args), run(b, ParamStore(b, flat.copy()), args)):
        assert np.array_equal(x, y)
