import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stan.branch import (
    POS_STD,
    CrossAttentionParams,
    PositionEmbeddings,
    StanSequence,
    build_first_input,
    cross_frame_attention,
    cross_frame_conv,
    fuse_final,
    fuse_level_input,
    init_conv_module,
    init_stan,
    intra_frame_forward,
    stan_forward,
    stan_layer_forward,
)
from stan.config import ConfigError, ModelConfig
from stan.encoders import backbone_layer_forward, init_backbone, mean_pool_embedding, pooled_embedding
from stan.layers import init_attention, init_block, named_tensors, ones, zeros
from stan.numerics import ShapeError, Tensor, grad_check


def seq(rng, T, L, D, lead=()):
    return StanSequence(Tensor(rng.standard_normal((*lead, D))), Tensor(rng.standard_normal((*lead, T, L, D))))


def zero_pos(T, L, D):
    return PositionEmbeddings(Tensor(np.zeros((T, D))), Tensor(np.zeros((L, D))))


# -- first input and fusion -------------------------------------------------

def test_first_input_without_pos_passes_patches(rng):
    tokens = Tensor(rng.standard_normal((3, 5, 4)))
    out = build_first_input(tokens, zero_pos(3, 4, 4))
    np.testing.assert_array_equal(out.patches.data, tokens.data[:, 1:])


def test_first_input_video_cls_is_frame_mean():
    tokens = np.zeros((2, 2, 2))
    tokens[0, 0], tokens[1, 0] = [1, 3], [3, 5]
    out = build_first_input(Tensor(tokens), zero_pos(2, 1, 2))
    np.testing.assert_array_equal(out.video_cls.data, [2, 4])


def test_first_input_position_additivity():
    T, L, D = 3, 4, 2
    pos = PositionEmbeddings(
        Tensor(np.arange(T)[:, None] * np.ones((T, D))), Tensor(np.arange(L)[:, None] * np.ones((L, D)))
    )
    out = build_first_input(Tensor(np.zeros((T, L + 1, D))), pos).patches.data
    for i in range(T):
        for j in range(L):
            np.testing.assert_array_equal(out[i, j], np.full(D, i + j))


def test_first_input_cls_gets_no_dropout_or_pos(rng):
    T, L, D = 3, 4, 6
    tokens = Tensor(rng.standard_normal((T, L + 1, D)))
    pos = PositionEmbeddings(Tensor(rng.standard_normal((T, D))), Tensor(rng.standard_normal((L, D))))
    out = build_first_input(tokens, pos, dropout_p=0.5, training=True, rng=np.random.default_rng(0))
    np.testing.assert_allclose(out.video_cls.data, tokens.data[:, 0].mean(axis=0), rtol=1e-15, atol=1e-15)
    assert np.any(out.patches.data == 0.0)


def test_fuse_zero_projection_is_identity(rng):
    prev = seq(rng, 2, 3, 4)
    out = fuse_level_input(prev, Tensor(rng.standard_normal((2, 4, 4))), Tensor(np.zeros((4, 4))))
    np.testing.assert_array_equal(out.patches.data, prev.patches.data)
    np.testing.assert_array_equal(out.video_cls.data, prev.video_cls.data)


def test_fuse_identity_projection_from_zero(rng):
    vk = rng.standard_normal((2, 4, 4))
    prev = StanSequence(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3, 4))))
    out = fuse_level_input(prev, Tensor(vk), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.patches.data, vk[:, 1:])
    np.testing.assert_allclose(out.video_cls.data, vk[:, 0].mean(axis=0), rtol=1e-15)


def test_fuse_grad_through_projection(rng):
    prev = seq(rng, 2, 3, 4)
    vk = Tensor(rng.standard_normal((2, 4, 4)))
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    c1, c2 = rng.standard_normal(4), rng.standard_normal((2, 3, 4))

    def loss():
        out = fuse_level_input(prev, vk, w)
        return (out.video_cls * c1).sum() + (out.patches * c2).sum()

    assert grad_check(loss, {"w_proj": w}).passed


def test_fuse_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse_level_input(seq(rng, 2, 3, 4), Tensor(np.zeros((2, 5, 4))), Tensor(np.eye(4)))


# -- intra-frame module -----------------------------------------------------

def test_intra_identity_when_writes_vanish(rng):
    block = init_block(rng, 8, 2)
    block.attn.w_v.data[...] = 0.0
    block.fc2_w.data[...] = 0.0
    s = seq(rng, 3, 4, 8)
    out = intra_frame_forward(s, block)
    np.testing.assert_allclose(out.patches.data, s.patches.data, rtol=1e-15, atol=1e-15)
    np.testing.assert_allclose(out.video_cls.data, s.video_cls.data, rtol=1e-15, atol=1e-15)


def test_intra_identical_frames(rng):
    block = init_block(rng, 8, 2)
    frame = rng.standard_normal((1, 4, 8))
    cls = Tensor(rng.standard_normal(8))
    multi = intra_frame_forward(StanSequence(cls, Tensor(np.repeat(frame, 3, axis=0))), block)
    single = intra_frame_forward(StanSequence(cls, Tensor(frame)), block)
    np.testing.assert_allclose(multi.video_cls.data, single.video_cls.data, rtol=1e-13)


def test_intra_t1_matches_backbone_layer(rng):
    block = init_block(rng, 8, 2)
    tokens = rng.standard_normal((1, 5, 8))
    out = intra_frame_forward(StanSequence(Tensor(tokens[0, 0]), Tensor(tokens[:, 1:])), block)
    ref = backbone_layer_forward(Tensor(tokens), block).data
    np.testing.assert_allclose(out.video_cls.data, ref[0, 0], rtol=1e-13)
    np.testing.assert_allclose(out.patches.data, ref[:, 1:], rtol=1e-13)


# -- cross-frame attention ----------------------------------------------------

def _cross_params(rng, D, heads=1):
    return CrossAttentionParams(ones(D), zeros(D), init_attention(rng, D, heads))


def test_cross_attention_t1_reduces_to_value_path(rng):
    D = 4
    p = _cross_params(rng, D)
    p.attn.w_o.data[...] = np.eye(D)
    s = seq(rng, 1, 3, D)
    y = s.patches.data
    mu = y.mean(-1, keepdims=True)
    normed = (y - mu) / np.sqrt(((y - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
    out = cross_frame_attention(s, p).patches.data
    np.testing.assert_allclose(out, normed @ p.attn.w_v.data + y, rtol=1e-12)


def test_cross_attention_vs_brute_force(rng):
    T, L, D = 2, 3, 4
    p = _cross_params(rng, D)
    s = seq(rng, T, L, D)
    out = cross_frame_attention(s, p).patches.data
    wq, wk, wv, wo = (getattr(p.attn, n).data for n in ("w_q", "w_k", "w_v", "w_o"))
    for j in range(L):
        y = s.patches.data[:, j]
        yn = (y - y.mean(-1, keepdims=True)) / np.sqrt(y.var(-1, keepdims=True) + 1e-5)
        a = np.zeros((T, T))
        for i in range(T):
            for k in range(T):
                a[i, k] = (yn[i] @ wq) @ (yn[k] @ wk) / np.sqrt(D)
        a = np.exp(a - a.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(out[:, j], a @ (yn @ wv) @ wo + y, rtol=1e-12, atol=1e-12)


def test_cross_attention_frame_permutation_equivariant(rng):
    p = _cross_params(rng, 8, heads=2)
    s = seq(rng, 5, 3, 8)
    perm = rng.permutation(5)
    a = cross_frame_attention(s, p).patches.data[perm]
    b = cross_frame_attention(StanSequence(s.video_cls, Tensor(s.patches.data[perm])), p).patches.data
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_cross_attention_leaves_cls(rng):
    s = seq(rng, 3, 2, 8)
    assert cross_frame_attention(s, _cross_params(rng, 8)).video_cls is s.video_cls


def test_cross_attention_needs_params(rng):
    with pytest.raises(ConfigError):
        cross_frame_attention(seq(rng, 2, 2, 8), None)


# -- cross-frame conv ---------------------------------------------------------

def test_conv_bottleneck_width():
    p = init_conv_module(np.random.default_rng(0), 64)
    assert p.down_w.shape == (64, 8)
    assert p.kernel.shape == (8, 8, 3, 1, 1)
    assert p.up_w.shape == (8, 64)


def test_conv_zero_up_is_identity(rng):
    p = init_conv_module(rng, 16, zero_up=True)
    s = seq(rng, 4, 4, 16)
    np.testing.assert_array_equal(cross_frame_conv(s, p, (2, 2)).patches.data, s.patches.data)


@pytest.mark.parametrize("t", [0, 2, 5])
def test_conv_impulse_locality(rng, t):
    T, D = 6, 16
    p = init_conv_module(rng, D)
    base = seq(rng, T, 4, D)
    bumped = base.patches.data.copy()
    bumped[t, 1] += 1.0
    a = cross_frame_conv(base, p, (2, 2)).patches.data
    b = cross_frame_conv(StanSequence(base.video_cls, Tensor(bumped)), p, (2, 2)).patches.data
    changed = np.abs(b - a).sum(axis=-1) != 0
    expect = np.zeros((T, 4), dtype=bool)
    expect[max(t - 1, 0) : t + 2, 1] = True
    np.testing.assert_array_equal(changed, expect)


def test_conv_grid_mismatch(rng):
    with pytest.raises(ShapeError):
        cross_frame_conv(seq(rng, 2, 4, 16), init_conv_module(rng, 16), (3, 2))


def test_conv_needs_params(rng):
    with pytest.raises(ConfigError):
        cross_frame_conv(seq(rng, 2, 4, 16), None, (2, 2))


# -- whole layer, chain and fusion ------------------------------------------

def _layer_cfg(variant, **kw):
    base = dict(T=2, grid_h=2, grid_w=2, D=8, heads=2, depth=2, K=1, level_range_end=2, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(cross_frame_variant=variant, **base)


@pytest.mark.parametrize("variant", ["self_attention", "conv3d"])
def test_full_layer_grad_check(variant, rng):
    cfg = _layer_cfg(variant)
    params = init_stan(cfg, 0)
    layer = params.layers[0]
    s = StanSequence(Tensor(rng.standard_normal(8), requires_grad=True),
                     Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True))
    c1, c2 = rng.standard_normal(8), rng.standard_normal((2, 4, 8))

    def loss():
        out = stan_layer_forward(s, layer, cfg)
        return (out.video_cls * c1).sum() + (out.patches * c2).sum()

    rep = grad_check(loss, {"cls": s.video_cls, "patches": s.patches, **named_tensors(layer)})
    assert rep.passed, rep.max_rel_err


@pytest.mark.parametrize("variant", ["self_attention", "conv3d"])
def test_identity_configured_layer(variant, rng):
    cfg = _layer_cfg(variant, zero_init_branch=True)
    layer = init_stan(cfg, 0).layers[0]
    s = seq(rng, 2, 4, 8)
    out = stan_layer_forward(s, layer, cfg)
    np.testing.assert_array_equal(out.patches.data, s.patches.data)
    np.testing.assert_array_equal(out.video_cls.data, s.video_cls.data)


def test_layer_switches_skip_modules(rng):
    cfg = _layer_cfg("self_attention", use_cross_frame=False, use_intra_frame=False)
    s = seq(rng, 2, 4, 8)
    out = stan_layer_forward(s, init_stan(cfg, 0).layers[0], cfg)
    assert out is s


def test_init_has_exactly_one_cross_module():
    for variant in ("self_attention", "conv3d"):
        for layer in init_stan(_layer_cfg(variant, K=2, depth=2), 0).layers:
            assert (layer.cross_attn is None) != (layer.cross_conv is None)
    assert POS_STD > 0


def test_stan_forward_k1_is_first_input_plus_layer(rng):
    cfg = _layer_cfg("self_attention")
    params = init_stan(cfg, 0)
    lvl = Tensor(rng.standard_normal((2, 5, 8)))
    got = stan_forward([lvl], params, cfg)
    ref = stan_layer_forward(build_first_input(lvl, params.pos), params.layers[0], cfg)
    np.testing.assert_array_equal(got.patches.data, ref.patches.data)


def test_stan_forward_level_count(rng):
    cfg = _layer_cfg("self_attention", K=2)
    with pytest.raises(ShapeError):
        stan_forward([Tensor(np.zeros((2, 5, 8)))], init_stan(cfg, 0), cfg)


def test_fuse_final_reductions(rng):
    cfg = ModelConfig(D=8, heads=2, T=2, depth=2, K=1, level_range_end=2)
    bb = init_backbone(cfg, 0)
    final = Tensor(rng.standard_normal((2, 17, 8)))
    base = mean_pool_embedding(final, bb).data
    silent = StanSequence(Tensor(np.zeros(8)), Tensor(np.zeros((2, 16, 8))))
    np.testing.assert_array_equal(fuse_final(final, silent, bb, Tensor(np.ones(1))).data, base)
    np.testing.assert_array_equal(fuse_final(final, None, bb, None).data, base)


def test_fuse_final_linear_before_norm(rng):
    """Doubling alpha doubles the branch share of the pre-norm sum."""
    cfg = ModelConfig(D=8, heads=2)
    bb = init_backbone(cfg, 0)
    bb.w_out.data[...] = np.eye(8)
    final = Tensor(rng.standard_normal((2, 17, 8)))
    s = StanSequence(Tensor(rng.standard_normal(8)), Tensor(np.zeros((2, 16, 8))))
    mean_cls = final.data[:, 0].mean(0)
    for a in (1.0, 2.0):
        expected = pooled_embedding(Tensor(mean_cls + a * s.video_cls.data), bb).data
        np.testing.assert_allclose(fuse_final(final, s, bb, Tensor([a])).data, expected, rtol=1e-13)


@given(
    st.integers(1, 4), st.sampled_from([(1, 1), (1, 2), (2, 2)]), st.sampled_from([8, 16]),
    st.integers(1, 3), st.sampled_from(["self_attention", "conv3d"]), st.integers(0, 1000),
)
def test_every_layer_preserves_shape(T, grid, D, K, variant, seed):
    cfg = ModelConfig(T=T, grid_h=grid[0], grid_w=grid[1], D=D, heads=2, depth=3, K=K, level_range_end=3,
                      mlp_ratio=1, cross_frame_variant=variant)
    r = np.random.default_rng(seed)
    params = init_stan(cfg, seed)
    levels = [Tensor(r.standard_normal((T, cfg.L + 1, D))) for _ in range(K)]
    s = build_first_input(levels[0], params.pos)
    for k in range(K):
        if k:
            s = fuse_level_input(s, levels[k], params.layers[k].w_proj)
        before = s.shape
        s = stan_layer_forward(s, params.layers[k], cfg)
        assert s.shape == before == ((D,), (T, cfg.L, D))
