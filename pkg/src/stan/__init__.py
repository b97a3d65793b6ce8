"""Spatial-temporal auxiliary branch over a frozen image encoder, at desk scale."""

from .config import ModelConfig, RunConfig

__all__ = ["ModelConfig", "RunConfig"]
