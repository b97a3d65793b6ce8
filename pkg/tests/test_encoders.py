import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stan.config import ConfigError, ModelConfig
from stan.encoders import (
    WeightFileError,
    backbone_forward,
    backbone_forward_multilevel,
    backbone_layer_forward,
    init_backbone,
    init_text_encoder,
    load_weights_into,
    patchify,
    read_weights,
    save_weights,
    select_levels,
    text_encode,
    text_encode_batch,
)
from stan.layers import AttentionParams, attention, init_block, named_tensors
from stan.numerics import ShapeError, Tensor, grad_check


def frames_for(cfg, rng, n=None):
    shape = (cfg.T, 1, cfg.frame_h, cfg.frame_w)
    return rng.random(shape if n is None else (n, *shape))


# -- patchify ---------------------------------------------------------------

def test_patchify_token_count(rng):
    cfg = ModelConfig()
    out = patchify(frames_for(cfg, rng), init_backbone(cfg, 0), 4)
    assert out.shape == (8, 17, 64)


def test_patchify_rejects_indivisible_frame(rng):
    params = init_backbone(ModelConfig(), 0)
    with pytest.raises(ShapeError):
        patchify(rng.random((2, 1, 15, 16)), params, 4)


def test_patchify_zero_everything_leaves_cls():
    cfg = ModelConfig(T=2)
    params = init_backbone(cfg, 0)
    for t in (params.patch_w, params.patch_b, params.pos):
        t.data[...] = 0.0
    out = patchify(np.zeros((2, 1, 16, 16)), params, 4).data
    assert not np.any(out[:, 1:])
    np.testing.assert_array_equal(out[:, 0], np.broadcast_to(params.cls.data, (2, 64)))


def test_patchify_patch_order_is_row_major():
    cfg = ModelConfig(T=1, D=8, heads=2)
    params = init_backbone(cfg, 0)
    params.patch_b.data[...] = 0.0
    params.pos.data[...] = 0.0
    frame = np.zeros((1, 1, 16, 16))
    frame[0, 0, 4:8, 8:12] = 1.0  # grid cell (1, 2) -> patch index 1*4 + 2
    out = patchify(frame, params, 4).data
    nonzero = np.flatnonzero(np.abs(out[0, 1:]).sum(axis=1))
    assert list(nonzero) == [6]


# -- backbone layer ---------------------------------------------------------

def test_layer_with_zero_writes_is_identity(rng):
    layer = init_block(rng, 8, 2)
    layer.attn.w_o.data[...] = 0.0
    layer.fc2_w.data[...] = 0.0
    x = Tensor(rng.standard_normal((3, 5, 8)))
    np.testing.assert_array_equal(backbone_layer_forward(x, layer).data, x.data)


def brute_attention(x, wq, wk, wv, wo):
    """Single head, explicit loops over query/key pairs."""
    n, d = x.shape
    out = np.zeros((n, d))
    for i in range(n):
        q = x[i] @ wq
        scores = np.array([q @ (x[j] @ wk) / np.sqrt(d) for j in range(n)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[i] = sum(w[j] * (x[j] @ wv) for j in range(n))
    return out @ wo


def test_single_head_two_token_attention_vs_brute_force(rng):
    d = 4
    ws = [rng.standard_normal((d, d)) for _ in range(4)]
    p = AttentionParams(*(Tensor(w) for w in ws), heads=1)
    x = rng.standard_normal((2, d))
    np.testing.assert_allclose(attention(Tensor(x), p).data, brute_attention(x, *ws), rtol=1e-12, atol=1e-12)


def test_multi_head_attention_vs_per_head_brute_force(rng):
    d, h, n = 6, 3, 4
    dh = d // h
    ws = [rng.standard_normal((d, d)) for _ in range(4)]
    x = rng.standard_normal((n, d))
    q, k, v = x @ ws[0], x @ ws[1], x @ ws[2]
    heads = []
    for i in range(h):
        s = slice(i * dh, (i + 1) * dh)
        sc = q[:, s] @ k[:, s].T / np.sqrt(dh)
        w = np.exp(sc - sc.max(axis=1, keepdims=True))
        heads.append((w / w.sum(axis=1, keepdims=True)) @ v[:, s])
    ref = np.concatenate(heads, axis=1) @ ws[3]
    got = attention(Tensor(x), AttentionParams(*(Tensor(w) for w in ws), heads=h)).data
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_backbone_layer_grad_check(rng):
    layer = init_block(rng, 8, 2, mlp_ratio=2)
    params = named_tensors(layer)
    for t in params.values():
        t.requires_grad = True
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
    w = rng.standard_normal((2, 3, 8))
    rep = grad_check(lambda: (backbone_layer_forward(x, layer) * w).sum(), {"x": x, **params})
    assert rep.passed, rep.max_rel_err


def test_backbone_layer_frame_permutation_equivariant(rng):
    layer = init_block(rng, 8, 2)
    x = rng.standard_normal((4, 5, 8))
    perm = rng.permutation(4)
    a = backbone_layer_forward(Tensor(x), layer).data[perm]
    b = backbone_layer_forward(Tensor(x[perm]), layer).data
    np.testing.assert_array_equal(a, b)


# -- level selection --------------------------------------------------------

@pytest.mark.parametrize(
    "interval, expected", [(2, [6, 8, 10, 12]), (1, [9, 10, 11, 12]), (3, [3, 6, 9, 12])]
)
def test_select_levels_examples(interval, expected):
    cfg = ModelConfig(depth=12, K=4, level_interval=interval, level_range_end=12)
    assert select_levels(cfg) == expected


def test_select_levels_underflow():
    cfg = ModelConfig(depth=8, K=4, level_interval=3, level_range_end=8)
    with pytest.raises(ConfigError):
        select_levels(cfg)


@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 12))
def test_select_levels_properties(depth, interval, K):
    end = depth
    if K > depth or end - (K - 1) * interval < 1:
        return
    levels = select_levels(ModelConfig(depth=depth, K=K, level_interval=interval, level_range_end=end))
    assert len(levels) == K
    assert levels[-1] == end
    assert all(b - a == interval for a, b in zip(levels, levels[1:]))
    assert levels[0] >= 1


# -- multi-level forward ----------------------------------------------------

def test_multilevel_k1_equals_final(rng):
    cfg = ModelConfig(T=2, K=1, depth=3, level_range_end=3)
    params = init_backbone(cfg, 0)
    levels, final = backbone_forward_multilevel(frames_for(cfg, rng), params, cfg)
    assert len(levels) == 1 and levels[0].level_index == 3
    np.testing.assert_array_equal(levels[0].tokens.data, final.data)


def test_multilevel_capture_does_not_interfere(rng):
    cfg = ModelConfig(T=2, depth=6, level_range_end=6, K=3, level_interval=2)
    params = init_backbone(cfg, 0)
    frames = frames_for(cfg, rng)
    levels, final = backbone_forward_multilevel(frames, params, cfg)
    assert [lf.level_index for lf in levels] == [2, 4, 6]
    assert final.data.tobytes() == backbone_forward(frames, params, cfg).data.tobytes()
    assert all(not lf.tokens.requires_grad for lf in levels)


def test_multilevel_k_exceeds_depth(rng):
    cfg = ModelConfig(depth=2, K=2, level_range_end=2)
    bad = ModelConfig(depth=2, K=3, level_range_end=2, level_interval=1)
    with pytest.raises(ConfigError):
        backbone_forward_multilevel(frames_for(cfg, rng), init_backbone(cfg, 0), bad)


def test_backbone_is_frozen():
    params = init_backbone(ModelConfig(), 0)
    assert all(not t.requires_grad for t in named_tensors(params).values())


# -- text encoder -----------------------------------------------------------

def test_text_single_token_zero_layers():
    cfg = ModelConfig(D=8, heads=2, text_depth=0)
    p = init_text_encoder(cfg, 0)
    got = text_encode([5], p, cfg).data
    from stan.numerics import layer_norm

    ref = layer_norm(p.tok_emb[5] + p.pos[0], p.ln_g, p.ln_b).data @ p.proj.data
    np.testing.assert_allclose(got, ref, rtol=1e-13)


def test_text_padding_is_masked(rng):
    cfg = ModelConfig(D=8, heads=2)
    p = init_text_encoder(cfg, 0)
    ids = np.array([[3, 9, 4, 0, 0, 0, 0, 0], [3, 9, 4, 17, 2, 8, 1, 1]])
    out = text_encode_batch(ids, np.array([3, 3]), p, cfg).data
    np.testing.assert_allclose(out[0], out[1], rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(out[0], text_encode([3, 9, 4], p, cfg).data, rtol=1e-13, atol=1e-13)


def test_text_errors():
    cfg = ModelConfig(D=8, heads=2)
    p = init_text_encoder(cfg, 0)
    with pytest.raises(ValueError):
        text_encode([], p, cfg)
    with pytest.raises(ValueError):
        text_encode([cfg.text_vocab], p, cfg)


def test_text_grad_check():
    cfg = ModelConfig(D=8, heads=2, text_depth=1, mlp_ratio=2, text_vocab=12, text_len=4)
    p = init_text_encoder(cfg, 0)
    ids = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    w = np.random.default_rng(0).standard_normal((2, 8))
    rep = grad_check(lambda: (text_encode_batch(ids, np.array([3, 2]), p, cfg) * w).sum(), named_tensors(p))
    assert rep.passed, rep.max_rel_err


# -- weight files -----------------------------------------------------------

def test_weights_round_trip(tmp_path):
    cfg = ModelConfig(D=8, heads=2, depth=2, K=1, level_range_end=2)
    src = named_tensors(init_backbone(cfg, 0), "backbone")
    path = tmp_path / "w.bin"
    save_weights(path, src)
    stored = read_weights(path)
    assert list(stored) == list(src)
    for k, t in src.items():
        assert stored[k].tobytes() == t.data.tobytes()
    dst = init_backbone(cfg, 1)
    load_weights_into(dst, path, "backbone")
    for k, t in named_tensors(dst, "backbone").items():
        assert t.data.tobytes() == src[k].data.tobytes()


def test_weights_file_errors(tmp_path):
    cfg = ModelConfig(D=8, heads=2, depth=2, K=1, level_range_end=2)
    good = tmp_path / "w.bin"
    save_weights(good, named_tensors(init_backbone(cfg, 0)))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXXXXX" + good.read_bytes()[8:])
    with pytest.raises(WeightFileError):
        read_weights(bad)
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(WeightFileError):
        read_weights(trunc)
    other = init_backbone(ModelConfig(D=16, heads=2, depth=2, K=1, level_range_end=2), 0)
    with pytest.raises(WeightFileError):
        load_weights_into(other, good)
