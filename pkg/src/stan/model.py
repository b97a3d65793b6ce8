"""Full video model: frozen backbone, branch, text encoder and recognition head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .branch import StanParams, fuse_final, init_stan, is_baseline, stan_forward
from .config import ModelConfig
from .encoders import (
    BackboneParams,
    TextEncoderParams,
    backbone_forward_multilevel,
    init_backbone,
    init_text_encoder,
    select_levels,
)
from .layers import gaussian, named_tensors, zeros
from .numerics import Tensor, no_grad, rng_stream


@dataclass
class RecognitionHead:
    w: Tensor  # [D, num_classes]
    b: Tensor


@dataclass
class StanModel:
    config: ModelConfig
    backbone: BackboneParams
    branch: StanParams | None
    text: TextEncoderParams
    head: RecognitionHead

    def trainable(self, task: str) -> dict[str, Tensor]:
        out = {}
        if self.branch is not None:
            out.update(named_tensors(self.branch, "branch"))
        out.update(named_tensors(self.text, "text") if task == "retrieval" else named_tensors(self.head, "head"))
        return out

    def state(self) -> dict[str, Tensor]:
        """Every tensor, backbone included, under stable dotted names."""
        out = named_tensors(self.backbone, "backbone")
        if self.branch is not None:
            out.update(named_tensors(self.branch, "branch"))
        out.update(named_tensors(self.text, "text"))
        out.update(named_tensors(self.head, "head"))
        return out


def build_model(config: ModelConfig, seed: int) -> StanModel:
    config.validate()
    backbone = init_backbone(config, seed)
    branch = None if is_baseline(config) else init_stan(config, seed, backbone)
    rng = rng_stream(seed, "head")
    head = RecognitionHead(gaussian(rng, (config.D, config.num_classes), 1.0 / np.sqrt(config.D)), zeros(config.num_classes))
    return StanModel(config, backbone, branch, init_text_encoder(config, seed), head)


@dataclass
class FeatureCache:
    """Frozen backbone activations for a set of clips."""

    levels: np.ndarray  # [N, K, T, L+1, D]
    final: np.ndarray  # [N, T, L+1, D]
    level_index: list[int]

    def __len__(self) -> int:
        return self.final.shape[0]

    def batch(self, idx) -> tuple[list[Tensor], Tensor]:
        levels = [Tensor(self.levels[idx, k]) for k in range(self.levels.shape[1])]
        return levels, Tensor(self.final[idx])


def extract_features(model: StanModel, frames: np.ndarray, chunk: int = 128) -> FeatureCache:
    cfg = model.config
    wanted = select_levels(cfg)
    lv_chunks, fin_chunks = [], []
    for s in range(0, len(frames), chunk):
        levels, final = backbone_forward_multilevel(frames[s : s + chunk], model.backbone, cfg, wanted)
        lv_chunks.append(np.stack([lf.tokens.data for lf in levels], axis=1))
        fin_chunks.append(final.data)
    return FeatureCache(np.concatenate(lv_chunks), np.concatenate(fin_chunks), wanted)


def video_embedding(
    model: StanModel,
    levels: list[Tensor],
    final: Tensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    cfg = model.config
    if model.branch is None:
        return fuse_final(final, None, model.backbone, None, eps=cfg.ln_eps)
    if not cfg.use_branch:
        levels = [final] * cfg.K
    seq = stan_forward(levels, model.branch, cfg, training, rng)
    return fuse_final(final, seq, model.backbone, model.branch.alpha, cfg.use_branch, cfg.ln_eps)


def encode_videos(model: StanModel, feats: FeatureCache, chunk: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(feats), chunk):
            levels, final = feats.batch(slice(s, s + chunk))
            out.append(video_embedding(model, levels, final).data)
    return np.concatenate(out)
