"""Configuration definition."""

from __future__ import annotations

from typing import Any

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from safir.logging import LogLevel, Profile, configure_logging

from .kernel import Accumulation

__all__ = ["CLIP_MEAN", "CLIP_STD", "Config", "config"]

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
"""Per-channel mean of the CLIP pre-training image normalization."""

CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
"""Per-channel standard deviation of the CLIP pre-training normalization."""


class Config(BaseSettings):
    """Configuration for clearseg."""

    model_config = SettingsConfigDict(
        env_prefix="CLEARSEG_", case_sensitive=False
    )

    log: LogLevel = Field(
        LogLevel.INFO,
        title="Log level of the application's logger",
        description="One of error, info, or debug (any case)",
    )

    profile: Profile = Field(
        Profile.development, title="Application logging profile"
    )

    shorter_side: int = Field(
        448, ge=1, title="Target length of the shorter image side in pixels"
    )

    crop: int = Field(336, ge=1, title="Sliding window size in pixels")

    stride: int = Field(112, ge=1, title="Sliding window stride in pixels")

    image_mean: tuple[float, float, float] = Field(
        CLIP_MEAN, title="Per-channel normalization mean"
    )

    image_std: tuple[float, float, float] = Field(
        CLIP_STD, title="Per-channel normalization standard deviation"
    )

    layer_norm_eps: float = Field(
        1e-5, gt=0, title="Epsilon added inside layer norm square roots"
    )

    accumulate: Accumulation = Field(
        Accumulation.ORDERED,
        title="Matrix product accumulation strategy",
        description=(
            "ordered gives bit-reproducible results, blas is much faster"
            " for real checkpoints"
        ),
    )

    ignore_index: int = Field(
        255, title="Label value excluded from evaluation"
    )

    @field_validator("log", mode="before")
    @classmethod
    def _normalize_log_level(cls, v: Any) -> Any:
        if isinstance(v, str):
            return v.upper()
        return v


config = Config()
"""Configuration for clearseg."""


# Ensure this is always run so that command-line tools can rely on it as well.
configure_logging(
    profile=config.profile, log_level=config.log, name="clearseg"
)
