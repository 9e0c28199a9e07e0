"""Models for clearseg."""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Self

import numpy as np
from numpy.typing import NDArray
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from .kernel import Accumulation, GeluVariant, Tensor

__all__ = [
    "AttentionMode",
    "AttnMaps",
    "BlockTrace",
    "BlockWeights",
    "Branch",
    "MIoUReport",
    "PatchEmbeddings",
    "Readout",
    "RunConfig",
    "SegmentationResult",
    "StatsRecord",
    "SurgeryConfig",
    "TextEmbeddings",
    "VitConfig",
    "VitWeights",
    "Window",
    "WindowPlan",
]


class AttentionMode(StrEnum):
    """Attention used by the surgically modified block."""

    QK = "qk"
    """Standard query-key attention."""

    QQ = "qq"
    """Query-query self-self attention."""

    KK = "kk"
    """Key-key self-self attention."""

    VV = "vv"
    """Value-value self-self attention."""

    IDENTITY = "identity"
    """Every token attends only to itself."""

    QQ_PLUS_KK = "qq_plus_kk"
    """Sum of query-query and key-key attention (rows sum to two)."""


class Readout(StrEnum):
    """Token matrix of the last block passed to the final projection."""

    OUT = "out"
    RES = "res"
    ATTN = "attn"
    SUM = "sum"


class Branch(StrEnum):
    """Decomposed block branch summarized by the feature statistics."""

    RES = "res"
    ATTN = "attn"
    SUM = "sum"


class VitConfig(BaseModel):
    """Architecture of a ViT image encoder."""

    model_config = ConfigDict(frozen=True)

    image_size: int = Field(
        ..., ge=1, title="Checkpoint-native input size in pixels"
    )

    patch_size: int = Field(..., ge=1, title="Patch size in pixels")

    width: int = Field(..., ge=1, title="Token embedding channels")

    layers: int = Field(..., ge=1, title="Number of transformer blocks")

    heads: int = Field(..., ge=1, title="Number of attention heads")

    embed_dim: int = Field(
        ..., ge=1, title="Output embedding dimension after projection"
    )

    gelu_variant: GeluVariant = Field(
        GeluVariant.QUICK, title="Feed-forward activation"
    )

    @model_validator(mode="after")
    def _check_divisibility(self) -> Self:
        if self.width % self.heads != 0:
            msg = f"width {self.width} not divisible by heads {self.heads}"
            raise ValueError(msg)
        if self.image_size % self.patch_size != 0:
            msg = (
                f"image_size {self.image_size} not divisible by patch_size"
                f" {self.patch_size}"
            )
            raise ValueError(msg)
        return self

    @property
    def grid_size(self) -> int:
        """Tokens per side of the checkpoint-native patch grid."""
        return self.image_size // self.patch_size

    @property
    def head_dim(self) -> int:
        """Channels per attention head."""
        return self.width // self.heads

    @property
    def mlp_width(self) -> int:
        """Hidden width of the feed-forward network."""
        return 4 * self.width


class SurgeryConfig(BaseModel):
    """Inference-time modifications applied to the last transformer block.

    The defaults are the ``clearclip`` preset: query-query attention with
    the residual connection and feed-forward network removed.
    """

    model_config = ConfigDict(frozen=True)

    attn_mode: AttentionMode = Field(
        AttentionMode.QQ, title="Attention of the last block"
    )

    keep_residual: bool = Field(
        False, title="Whether to add the residual connection"
    )

    keep_ffn: bool = Field(
        False, title="Whether to apply the feed-forward network"
    )

    alpha: float = Field(
        1.0, gt=0, title="Scale applied to the attention branch"
    )

    beta: float = Field(
        0.0,
        ge=0,
        le=1,
        title="Fraction of highest-mean residual channels to zero",
    )

    readout: Readout = Field(
        Readout.OUT, title="Last-block token matrix used for projection"
    )

    @classmethod
    def preset(cls, name: str) -> SurgeryConfig:
        """Return a named surgery preset.

        Parameters
        ----------
        name
            One of ``vanilla``, ``maskclip``, ``sclip`` or ``clearclip``.

        Returns
        -------
        SurgeryConfig
            Corresponding configuration.

        Raises
        ------
        KeyError
            Raised if the preset is not known.
        """
        return PRESETS[name]


VANILLA = SurgeryConfig(
    attn_mode=AttentionMode.QK, keep_residual=True, keep_ffn=True
)
"""Unmodified CLIP."""

PRESETS: dict[str, SurgeryConfig] = {
    "vanilla": VANILLA,
    "maskclip": SurgeryConfig(attn_mode=AttentionMode.IDENTITY),
    "sclip": SurgeryConfig(
        attn_mode=AttentionMode.QQ_PLUS_KK, keep_residual=True, keep_ffn=True
    ),
    "clearclip": SurgeryConfig(),
}
"""Named surgery presets accepted by the command-line interface."""


@dataclass(frozen=True, slots=True)
class BlockWeights:
    """Parameters of one residual attention block.

    Linear weights are stored in PyTorch layout, ``out × in``.
    """

    ln1_gamma: Tensor
    ln1_beta: Tensor
    in_proj_weight: Tensor
    """Stacked query, key and value projections, ``3d × d``."""

    in_proj_bias: Tensor
    out_proj_weight: Tensor
    out_proj_bias: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc_weight: Tensor
    fc_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor


@dataclass(frozen=True, slots=True)
class VitWeights:
    """All parameters of a ViT image encoder."""

    patch_weight: Tensor
    """Patch embedding kernel, ``d × 3 × p × p``."""

    class_embedding: Tensor
    positional_embedding: Tensor
    """Native positional embeddings, ``(1 + grid²) × d``."""

    ln_pre_gamma: Tensor
    ln_pre_beta: Tensor
    blocks: tuple[BlockWeights, ...]
    ln_post_gamma: Tensor
    ln_post_beta: Tensor
    projection: Tensor
    """Final visual projection, ``d × embed_dim``."""


@dataclass(frozen=True, slots=True)
class TextEmbeddings:
    """Precomputed, L2-normalized class text embeddings."""

    matrix: Tensor
    """Embeddings, ``C × embed_dim``, rows in class order."""

    class_names: tuple[str, ...]
    """Class labels, in row order."""

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True, slots=True)
class AttnMaps:
    """Per-head attention matrices, ``heads × n × n``."""

    maps: Tensor
    head_dim: int


@dataclass(frozen=True, slots=True)
class BlockTrace:
    """Decomposed outputs of one block, each ``(1 + hw) × d``."""

    x_res: Tensor
    """Residual branch as it entered the summation."""

    x_attn: Tensor
    """Attention branch including the out-projection bias, before scaling."""

    x_sum: Tensor
    x_ffn: Tensor | None
    """Feed-forward output, or `None` when the FFN was removed."""

    x_out: Tensor

    def branch(self, branch: Branch) -> Tensor:
        """Return the token matrix for one statistics branch."""
        match branch:
            case Branch.RES:
                return self.x_res
            case Branch.ATTN:
                return self.x_attn
            case Branch.SUM:
                return self.x_sum


@dataclass(frozen=True, slots=True)
class PatchEmbeddings:
    """Projected patch tokens, class token excluded."""

    matrix: Tensor
    """Embeddings, ``(grid_h · grid_w) × embed_dim`` in row-major order."""

    grid_h: int
    grid_w: int


@dataclass(frozen=True, slots=True)
class Window:
    """One crop of a sliding-window plan, in pixels."""

    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True, slots=True)
class WindowPlan:
    """Sliding-window tiling of an image."""

    windows: tuple[Window, ...]
    crop_size: int
    stride: int


@dataclass(frozen=True, slots=True)
class SegmentationResult:
    """Dense prediction for one image."""

    label_map: NDArray[np.int64]
    """Class index per pixel, ``H × W``."""

    logit_map: Tensor
    """Cosine logits, ``C × H × W``."""

    class_names: tuple[str, ...]

    attn_norm: float = 0.0
    """Last-block attention norm over patch tokens, averaged over windows."""

    res_norm: float = 0.0
    """Last-block residual norm after masking, averaged over windows."""


@dataclass(frozen=True, slots=True)
class MIoUReport:
    """Intersection-over-union summary."""

    iou: NDArray[np.float64]
    """IoU per class, NaN for classes absent from prediction and truth."""

    miou: float
    """Mean IoU over classes that are not NaN."""

    confusion: NDArray[np.int64]
    """Confusion matrix indexed ``[truth, prediction]``."""

    ignored: int
    """Number of pixels skipped because the truth was the ignore index."""


@dataclass(frozen=True, slots=True)
class StatsRecord:
    """Feature statistics of one branch of one block."""

    layer: int
    """One-based block index."""

    branch: Branch
    entropy: float
    fro_norm: float
    max_value: float
    channel_means: NDArray[np.float64]
    """Normalized channel means sorted in ascending order."""


class RunConfig(BaseModel):
    """Settings of one command-line run.

    Every path is resolved to an absolute path on validation, so that the
    echo in output manifests does not depend on the working directory.
    """

    model_config = ConfigDict(frozen=True)

    checkpoint: Path = Field(..., title="Encoder checkpoint archive")

    text_embeddings: Path | None = Field(
        None, title="Class text embedding archive"
    )

    key_map: Path | None = Field(
        None, title="JSON remap table for checkpoint tensor names"
    )

    gelu_variant: GeluVariant | None = Field(
        None, title="Override for the checkpoint's feed-forward activation"
    )

    surgery: SurgeryConfig = Field(
        default_factory=SurgeryConfig, title="Last-block surgery"
    )

    shorter_side: int = Field(
        448, ge=1, title="Target length of the shorter image side"
    )

    crop: int = Field(336, ge=1, title="Sliding window size in pixels")

    stride: int = Field(112, ge=1, title="Sliding window stride in pixels")

    image_mean: tuple[float, float, float] = Field(
        (0.48145466, 0.4578275, 0.40821073),
        title="Per-channel normalization mean",
    )

    image_std: tuple[float, float, float] = Field(
        (0.26862954, 0.26130258, 0.27577711),
        title="Per-channel normalization standard deviation",
    )

    layer_norm_eps: float = Field(1e-5, gt=0, title="Layer-norm epsilon")

    accumulate: Accumulation = Field(
        Accumulation.ORDERED, title="Matrix product accumulation strategy"
    )

    ignore_index: int = Field(
        255, title="Label value excluded from evaluation"
    )

    output_dir: Path = Field(Path("clearseg-out"), title="Output directory")

    include_class_token: bool = Field(
        False, title="Whether statistics include the class token"
    )

    save_logits: bool = Field(
        False, title="Whether to write logit maps next to label maps"
    )

    jobs: int = Field(1, ge=1, title="Number of images processed at once")

    @field_validator(
        "checkpoint", "text_embeddings", "key_map", "output_dir"
    )
    @classmethod
    def _resolve_path(cls, v: Path | None) -> Path | None:
        return v.resolve() if v is not None else None
