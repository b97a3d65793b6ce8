"""The spatial-temporal auxiliary branch.

Every layer consumes a video sequence of one video-level CLS vector plus
``T x L`` patch vectors and returns a sequence of the same size. Layer 1 is
built from the first selected backbone level (CLS averaged over frames,
position embeddings added to patches); every later layer first fuses the
previous output with its own backbone level through a ``D x D`` projection.
Inside a layer the cross-frame module mixes tokens across time at fixed
spatial positions and the intra-frame module runs a backbone-style block per
frame with the video CLS duplicated into every frame.

Row-vector convention throughout: a projection ``W`` acts as ``x @ W``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError, ModelConfig
from .encoders import BackboneParams, LevelFeatures, pooled_embedding, select_levels
from .layers import (
    AttentionParams,
    BlockParams,
    attention,
    block_forward,
    gaussian,
    init_attention,
    init_block,
    named_tensors,
    ones,
    zeros,
)
from .numerics import ShapeError, Tensor, broadcast_to, concat, dropout, gelu, layer_norm, pad, rng_stream


@dataclass
class StanSequence:
    video_cls: Tensor  # [..., D]
    patches: Tensor  # [..., T, L, D]

    @property
    def shape(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.video_cls.shape, self.patches.shape


@dataclass
class PositionEmbeddings:
    pos_t: Tensor  # [T, D]
    pos_s: Tensor  # [L, D]


@dataclass
class CrossAttentionParams:
    ln_g: Tensor
    ln_b: Tensor
    attn: AttentionParams


@dataclass
class ConvModuleParams:
    down_w: Tensor  # [D, D/8]
    down_b: Tensor
    kernel: Tensor  # [D/8, D/8, 3, 1, 1] over (T, H, W)
    conv_b: Tensor
    up_w: Tensor  # [D/8, D]
    up_b: Tensor


@dataclass
class StanLayerParams:
    w_proj: Tensor | None
    intra: BlockParams
    cross_attn: CrossAttentionParams | None = None
    cross_conv: ConvModuleParams | None = None


@dataclass
class StanParams:
    pos: PositionEmbeddings
    layers: list[StanLayerParams]
    alpha: Tensor  # scalar gate on the branch contribution, shape (1,)


# -- init -------------------------------------------------------------------

# Position embeddings start at the scale of the backbone tokens (RMS ~1.3);
# at 0.1 the temporal signal is drowned and order is learned far too slowly.
POS_STD = 1.0


def init_conv_module(rng, D: int, zero_up: bool = False) -> ConvModuleParams:
    c = D // 8
    return ConvModuleParams(
        down_w=gaussian(rng, (D, c), 1.0 / np.sqrt(D)),
        down_b=zeros(c),
        kernel=gaussian(rng, (c, c, 3, 1, 1), 1.0 / np.sqrt(3 * c)),
        conv_b=zeros(c),
        up_w=zeros((c, D)) if zero_up else gaussian(rng, (c, D), 1.0 / np.sqrt(c)),
        up_b=zeros(D),
    )


def init_stan(config: ModelConfig, seed: int, backbone: BackboneParams | None = None) -> StanParams:
    """Fresh branch parameters.

    With ``zero_init_branch`` every residual write (attention ``w_o``, MLP
    output, conv up map) and the fusion gate start at zero, so the branch is
    silent at step 0. With ``init_intra_from_backbone`` each intra-frame block
    starts as a copy of the backbone layer at the same level.
    """
    config.validate()
    rng = rng_stream(seed, "branch")
    D, T, L, K = config.D, config.T, config.L, config.K
    zero = config.zero_init_branch
    levels = select_levels(config)
    layers = []
    for k in range(K):
        if config.init_intra_from_backbone and backbone is not None:
            intra = copy.deepcopy(backbone.layers[levels[k] - 1])
            for t in named_tensors(intra).values():
                t.requires_grad = True
            if zero:
                intra.attn.w_o.data[...] = 0.0
                intra.fc2_w.data[...] = 0.0
        else:
            intra = init_block(rng, D, config.heads, config.mlp_ratio, out_gain=1.0, zero_out=zero)
        cross_attn = cross_conv = None
        if config.cross_frame_variant == "self_attention":
            cross_attn = CrossAttentionParams(ones(D), zeros(D), init_attention(rng, D, config.heads, 1.0, zero))
        else:
            cross_conv = init_conv_module(rng, D, zero_up=zero)
        w_proj = None if k == 0 else gaussian(rng, (D, D), 1.0 / np.sqrt(D))
        layers.append(StanLayerParams(w_proj, intra, cross_attn, cross_conv))
    pos = PositionEmbeddings(pos_t=gaussian(rng, (T, D), POS_STD), pos_s=gaussian(rng, (L, D), POS_STD))
    alpha = Tensor(np.array([0.0 if zero else 1.0]), requires_grad=True)
    return StanParams(pos, layers, alpha)


# -- layer pieces -----------------------------------------------------------

def build_first_input(
    v1: LevelFeatures | Tensor,
    pos: PositionEmbeddings,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> StanSequence:
    tokens = v1.tokens if isinstance(v1, LevelFeatures) else v1
    if tokens.shape[-3:] != (pos.pos_t.shape[0], pos.pos_s.shape[0] + 1, pos.pos_t.shape[1]):
        raise ShapeError(f"level tokens {tokens.shape} do not match position embeddings")
    video_cls = tokens[..., 0, :].mean(axis=-2)
    patches = tokens[..., 1:, :] + pos.pos_t.reshape(pos.pos_t.shape[0], 1, -1) + pos.pos_s
    return StanSequence(video_cls, dropout(patches, dropout_p, training, rng))


def fuse_level_input(prev: StanSequence, vk: LevelFeatures | Tensor, w_proj: Tensor) -> StanSequence:
    tokens = vk.tokens if isinstance(vk, LevelFeatures) else vk
    if tokens[..., 1:, :].shape != prev.patches.shape:
        raise ShapeError(f"level tokens {tokens.shape} do not match sequence patches {prev.patches.shape}")
    cls_mean = tokens[..., 0, :].mean(axis=-2)
    return StanSequence(
        prev.video_cls + cls_mean @ w_proj,
        prev.patches + tokens[..., 1:, :] @ w_proj,
    )


def intra_frame_forward(seq: StanSequence, params: BlockParams, eps: float = 1e-5) -> StanSequence:
    *lead, T, L, D = seq.patches.shape
    cls = broadcast_to(seq.video_cls.reshape(*lead, 1, 1, D), (*lead, T, 1, D))
    x = block_forward(concat([cls, seq.patches], axis=-2), params, eps)
    return StanSequence(x[..., 0, :].mean(axis=-2), x[..., 1:, :])


def cross_frame_attention(seq: StanSequence, params: CrossAttentionParams | None, eps: float = 1e-5) -> StanSequence:
    if params is None:
        raise ConfigError("cross_frame_attention needs self-attention parameters")
    y = seq.patches.swapaxes(-2, -3)  # [..., L, T, D]
    y = y + attention(layer_norm(y, params.ln_g, params.ln_b, eps), params.attn)
    return StanSequence(seq.video_cls, y.swapaxes(-2, -3))


def cross_frame_conv(seq: StanSequence, params: ConvModuleParams | None, grid: tuple[int, int]) -> StanSequence:
    if params is None:
        raise ConfigError("cross_frame_conv needs conv3d parameters")
    *lead, T, L, D = seq.patches.shape
    gh, gw = grid
    if gh * gw != L:
        raise ShapeError(f"L={L} patches do not form a {gh}x{gw} grid")
    cube = seq.patches.reshape(*lead, T, gh, gw, D)
    h = cube @ params.down_w + params.down_b
    widths = [(0, 0)] * h.ndim
    widths[-4] = (1, 1)
    hp = pad(h, widths)
    conv = params.conv_b
    for k in range(3):
        # (3, 1, 1) kernel: spatial taps are 1x1, so each temporal tap is a channel map
        tap = params.kernel[:, :, k, 0, 0].transpose()
        conv = conv + hp[..., k : k + T, :, :, :] @ tap
    out = cube + gelu(conv) @ params.up_w + params.up_b
    return StanSequence(seq.video_cls, out.reshape(*lead, T, L, D))


def stan_layer_forward(seq: StanSequence, params: StanLayerParams, config: ModelConfig) -> StanSequence:
    """Cross-frame module, then intra-frame module; either may be switched off."""
    if config.use_cross_frame:
        if config.cross_frame_variant == "self_attention":
            seq = cross_frame_attention(seq, params.cross_attn, config.ln_eps)
        else:
            seq = cross_frame_conv(seq, params.cross_conv, (config.grid_h, config.grid_w))
    if config.use_intra_frame:
        seq = intra_frame_forward(seq, params.intra, config.ln_eps)
    return seq


def stan_forward(
    levels: Sequence[LevelFeatures | Tensor],
    params: StanParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> StanSequence:
    """Chain the K layers over the selected backbone levels.

    Without multi-level inputs every layer fuses the last level. In the
    posterior arrangement (no branch) the last level enters once, at layer 1,
    and later layers see only their predecessor's output.
    """
    if len(levels) != config.K:
        raise ShapeError(f"expected {config.K} levels, got {len(levels)}")
    if not config.use_multilevel:
        levels = [levels[-1]] * config.K
    seq = build_first_input(levels[0], params.pos, config.dropout_p, training, rng)
    seq = stan_layer_forward(seq, params.layers[0], config)
    for k in range(1, config.K):
        if config.use_branch:
            seq = fuse_level_input(seq, levels[k], params.layers[k].w_proj)
        seq = stan_layer_forward(seq, params.layers[k], config)
    return seq


def fuse_final(
    backbone_final: Tensor,
    stan_out: StanSequence | None,
    backbone: BackboneParams,
    alpha: Tensor | None,
    use_branch: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Video embedding from the backbone's last output and the branch output.

    Branch: ``W_out LN(mean_i CLS_i + alpha * video_cls)``. Posterior: the
    branch CLS alone goes through the backbone head. No branch output: the
    mean-pool baseline.
    """
    if stan_out is None:
        return pooled_embedding(backbone_final[..., 0, :].mean(axis=-2), backbone, eps)
    if not use_branch:
        return pooled_embedding(stan_out.video_cls, backbone, eps)
    fused = backbone_final[..., 0, :].mean(axis=-2) + stan_out.video_cls * alpha
    return pooled_embedding(fused, backbone, eps)


def is_baseline(config: ModelConfig) -> bool:
    """All four switches off: no branch at all, plain mean pooling."""
    return not (config.use_cross_frame or config.use_intra_frame or config.use_branch or config.use_multilevel)
