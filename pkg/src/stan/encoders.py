"""Frozen mini vision transformer, level selection, and the text encoder."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ModelConfig
from .layers import BlockParams, block_forward, gaussian, init_block, named_tensors, orthogonal
from .numerics import ShapeError, Tensor, broadcast_to, concat, layer_norm, no_grad, rng_stream

PAD_ID = 0
_MASK_NEG = -1e30


@dataclass
class LevelFeatures:
    level_index: int
    tokens: Tensor  # [..., T, L+1, D], position 0 is the frame CLS


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    layers: list[BlockParams]
    ln_post_g: Tensor
    ln_post_b: Tensor
    w_out: Tensor


@dataclass
class TextEncoderParams:
    tok_emb: Tensor
    pos: Tensor
    layers: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor
    proj: Tensor


def init_backbone(config: ModelConfig, seed: int) -> BackboneParams:
    """Random backbone, frozen from birth (``requires_grad=False`` everywhere)."""
    rng = rng_stream(seed, "backbone")
    D, L = config.D, config.L
    pdim = config.channels * config.patch_size**2
    return BackboneParams(
        patch_w=gaussian(rng, (pdim, D), 1.0 / np.sqrt(pdim) * 4.0, False),
        patch_b=gaussian(rng, (D,), 0.1, False),
        cls=gaussian(rng, (D,), 1.0, False),
        pos=gaussian(rng, (L + 1, D), 0.5, False),
        layers=[
            init_block(rng, D, config.heads, config.mlp_ratio, out_gain=0.5, requires_grad=False)
            for _ in range(config.depth)
        ],
        ln_post_g=Tensor(np.ones(D)),
        ln_post_b=Tensor(np.zeros(D)),
        w_out=orthogonal(rng, D, D, requires_grad=False),
    )


def init_text_encoder(config: ModelConfig, seed: int) -> TextEncoderParams:
    rng = rng_stream(seed, "text")
    D = config.D
    return TextEncoderParams(
        tok_emb=gaussian(rng, (config.text_vocab, D), 1.0),
        pos=gaussian(rng, (config.text_len, D), 0.1),
        layers=[init_block(rng, D, config.heads, config.mlp_ratio, out_gain=0.5) for _ in range(config.text_depth)],
        ln_g=Tensor(np.ones(D), requires_grad=True),
        ln_b=Tensor(np.zeros(D), requires_grad=True),
        proj=orthogonal(rng, D, D),
    )


# -- vision -----------------------------------------------------------------

def patchify(frames, params: BackboneParams, patch_size: int) -> Tensor:
    """Pixel frames ``[..., T, C, H, W]`` to tokens ``[..., T, L+1, D]``."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    *lead, C, H, W = frames.shape
    if H % patch_size or W % patch_size:
        raise ShapeError(f"frame size {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    n = len(lead)
    x = frames.reshape(*lead, C, gh, patch_size, gw, patch_size)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    x = x.reshape(*lead, gh * gw, C * patch_size * patch_size)
    patches = x @ params.patch_w + params.patch_b
    D = params.cls.shape[0]
    cls = broadcast_to(params.cls.reshape(1, D), (*lead, 1, D))
    return concat([cls, patches], axis=-2) + params.pos


def backbone_layer_forward(tokens: Tensor, layer: BlockParams, eps: float = 1e-5) -> Tensor:
    """One pre-norm layer; attention stays within each frame's L+1 tokens."""
    return block_forward(tokens, layer, eps)


def select_levels(config: ModelConfig) -> list[int]:
    """Backbone layer indices (1-based) feeding the K branch layers."""
    start = config.level_range_end - (config.K - 1) * config.level_interval
    if start < 1:
        raise ConfigError(
            f"level selection underflows layer 1: end={config.level_range_end}, "
            f"K={config.K}, interval={config.level_interval}"
        )
    return list(range(start, config.level_range_end + 1, config.level_interval))


def backbone_forward(frames, params: BackboneParams, config: ModelConfig) -> Tensor:
    """Plain forward pass returning the final-layer tokens."""
    with no_grad():
        x = patchify(frames, params, config.patch_size)
        for layer in params.layers:
            x = backbone_layer_forward(x, layer, config.ln_eps)
    return x


def backbone_forward_multilevel(
    frames, params: BackboneParams, config: ModelConfig, levels: Sequence[int] | None = None
) -> tuple[list[LevelFeatures], Tensor]:
    """Run every layer once, capturing the token states after each selected layer.

    Captured tensors are constants: no gradient path leads back into the
    backbone.
    """
    if config.K > config.depth:
        raise ConfigError(f"K={config.K} exceeds depth={config.depth}")
    wanted = list(levels) if levels is not None else select_levels(config)
    captured: list[LevelFeatures] = []
    with no_grad():
        x = patchify(frames, params, config.patch_size)
        for i, layer in enumerate(params.layers, start=1):
            x = backbone_layer_forward(x, layer, config.ln_eps)
            if i in wanted:
                captured.append(LevelFeatures(i, Tensor(x.data.copy())))
    return captured, Tensor(x.data.copy())


def pooled_embedding(cls_mean: Tensor, params: BackboneParams, eps: float = 1e-5) -> Tensor:
    """Backbone head: final norm then output projection."""
    return layer_norm(cls_mean, params.ln_post_g, params.ln_post_b, eps) @ params.w_out


def mean_pool_embedding(final_tokens: Tensor, params: BackboneParams, eps: float = 1e-5) -> Tensor:
    """Baseline video embedding from the mean of per-frame CLS tokens."""
    return pooled_embedding(final_tokens[..., 0, :].mean(axis=-2), params, eps)


# -- text -------------------------------------------------------------------

def pad_captions(captions: Sequence[Sequence[int]], config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(captions), config.text_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(captions), dtype=np.int64)
    for i, cap in enumerate(captions):
        cap = list(cap)
        if not 1 <= len(cap) <= config.text_len:
            raise ValueError(f"caption {i} length {len(cap)} outside [1, {config.text_len}]")
        if any(not 0 <= t < config.text_vocab for t in cap):
            raise ValueError(f"caption {i} has a token id outside [0, {config.text_vocab})")
        ids[i, : len(cap)] = cap
        lengths[i] = len(cap)
    return ids, lengths


def text_encode_batch(ids: np.ndarray, lengths: np.ndarray, params: TextEncoderParams, config: ModelConfig) -> Tensor:
    """Padded token ids ``[N, S]`` to embeddings ``[N, D]``."""
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    if ids.ndim != 2 or ids.shape[1] > params.pos.shape[0]:
        raise ShapeError(f"token id array shape {ids.shape} incompatible with text_len {params.pos.shape[0]}")
    if np.any(lengths < 1):
        raise ValueError("empty caption")
    if ids.min() < 0 or ids.max() >= params.tok_emb.shape[0]:
        raise ValueError("token id out of vocabulary")
    N, S = ids.shape
    x = params.tok_emb[ids] + params.pos[:S]
    keep = np.arange(S)[None, :] < lengths[:, None]
    mask = np.where(keep, 0.0, _MASK_NEG)[:, None, None, :]
    for layer in params.layers:
        x = block_forward(x, layer, config.ln_eps, mask)
    last = x[np.arange(N), lengths - 1]
    return layer_norm(last, params.ln_g, params.ln_b, config.ln_eps) @ params.proj


def text_encode(token_ids: Sequence[int], params: TextEncoderParams, config: ModelConfig) -> Tensor:
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("empty caption")
    if len(token_ids) > config.text_len:
        raise ValueError(f"caption longer than text_len={config.text_len}")
    ids, lengths = pad_captions([token_ids], config)
    return text_encode_batch(ids, lengths, params, config)[0]


# -- weight files -----------------------------------------------------------

WEIGHT_MAGIC = b"STANW01\x00"


class WeightFileError(ValueError):
    pass


def save_weights(path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Little-endian: magic, then per tensor (u32 name len, name, u32 rank, u32 dims, f64 data)."""
    chunks = [WEIGHT_MAGIC]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {buf[:8]!r}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise WeightFileError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise WeightFileError(f"{path}: truncated header") from exc
    return out


def load_weights_into(params, path, prefix: str = "") -> None:
    """Overwrite ``params`` in place, validating names and shapes."""
    stored = read_weights(path)
    for name, t in named_tensors(params, prefix).items():
        if name not in stored:
            raise WeightFileError(f"{path}: missing tensor {name!r}")
        if stored[name].shape != t.shape:
            raise WeightFileError(f"{path}: {name!r} has shape {stored[name].shape}, expected {t.shape}")
        t.data[...] = stored[name]
