"""Architecture and run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

VARIANTS = ("self_attention", "conv3d")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 8
    grid_h: int = 4
    grid_w: int = 4
    patch_size: int = 4
    channels: int = 1
    D: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    K: int = 4
    level_interval: int = 1
    level_range_end: int = 8
    cross_frame_variant: str = "self_attention"
    use_cross_frame: bool = True
    use_intra_frame: bool = True
    use_branch: bool = True
    use_multilevel: bool = True
    dropout_p: float = 0.0
    zero_init_branch: bool = False
    init_intra_from_backbone: bool = False
    num_classes: int = 8
    text_vocab: int = 64
    text_len: int = 8
    text_depth: int = 2
    nce_temperature: float = 0.05
    dsl_temperature: float = 1.0
    ln_eps: float = 1e-5

    @property
    def L(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def frame_h(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def frame_w(self) -> int:
        return self.grid_w * self.patch_size

    @property
    def bottleneck(self) -> int:
        return self.D // 8

    def validate(self) -> "ModelConfig":
        if min(self.T, self.grid_h, self.grid_w, self.patch_size, self.D, self.depth, self.heads) < 1:
            raise ConfigError("sizes must be positive")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} not divisible by heads={self.heads}")
        if self.D % 8:
            raise ConfigError(f"D={self.D} not divisible by 8 (conv bottleneck)")
        if not 1 <= self.K <= self.depth:
            raise ConfigError(f"K={self.K} must lie in [1, depth={self.depth}]")
        if self.cross_frame_variant not in VARIANTS:
            raise ConfigError(f"unknown cross-frame variant {self.cross_frame_variant!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.level_interval < 1:
            raise ConfigError("level_interval must be >= 1")
        if not 1 <= self.level_range_end <= self.depth:
            raise ConfigError(f"level_range_end={self.level_range_end} outside [1, {self.depth}]")
        if self.level_range_end - (self.K - 1) * self.level_interval < 1:
            raise ConfigError(
                f"levels underflow: end {self.level_range_end}, K {self.K}, interval {self.level_interval}"
            )
        if self.nce_temperature <= 0:
            raise ConfigError("nce_temperature must be positive")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: str = "recognition"
    epochs: int = 12
    batch_size: int = 16
    lr_backbone: float = 2e-6  # backbone stays frozen; kept for completeness
    lr_branch: float = 1e-3
    weight_decay: float = 0.02
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    n_per_class: int = 64
    eval_per_class: int = 24
    dataset: str | None = None
    eval_dataset: str | None = None
    report: str | None = None
    use_dsl: bool = False

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.task not in ("retrieval", "recognition"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.lr_branch < 0:
            raise ConfigError("lr_branch must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.use_dsl and self.task != "retrieval":
            raise ConfigError("DSL applies to retrieval only")
        return self

    def replace(self, **changes) -> "RunConfig":
        model_changes = {k: v for k, v in changes.items() if k in _MODEL_FIELDS}
        run_changes = {k: v for k, v in changes.items() if k not in _MODEL_FIELDS}
        model = self.model.replace(**model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **run_changes)


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
