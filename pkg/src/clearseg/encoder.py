"""ViT image encoder with decomposed blocks and last-block surgery.

Each residual attention block is evaluated as::

    x_attn = Proj(Attn(LN1(x)) · v) + b_o
    x_sum  = x_res + alpha · x_attn        (x_res dropped without residual)
    x_out  = x_sum + FFN(LN2(x_sum))       (FFN dropped when removed)

Surgery only ever applies to the last block. Without surgery every block is
plain CLIP: query-key attention, ``alpha = 1``, residual and FFN kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, UnsupportedLayoutError
from .kernel import (
    Accumulation,
    Tensor,
    check_finite,
    gelu,
    interpolate_grid,
    layer_norm,
    matmul,
    softmax_rows,
)
from .models import (
    AttentionMode,
    AttnMaps,
    BlockTrace,
    BlockWeights,
    PatchEmbeddings,
    Readout,
    SurgeryConfig,
    VitConfig,
    VitWeights,
)
from .stats import mask_top_channels, top_channels

__all__ = [
    "VitEncoder",
    "attention_maps",
    "block_forward",
    "encode_dense",
    "interpolate_pos_embed",
    "merge_heads",
    "patch_embed",
    "project_attention",
    "split_heads",
]


@dataclass(frozen=True, slots=True)
class VitEncoder:
    """Immutable bundle of an encoder architecture and its weights.

    Safe to share between threads; each call to `encode_dense` is
    independent.
    """

    config: VitConfig
    weights: VitWeights
    eps: float = 1e-5
    accumulate: Accumulation = Accumulation.ORDERED

    def encode_dense(
        self,
        pixels: Tensor,
        surgery: SurgeryConfig | None = None,
        *,
        trace: bool = False,
    ) -> tuple[PatchEmbeddings, list[BlockTrace] | None]:
        """Encode one normalized image; see `encode_dense`."""
        return encode_dense(
            pixels,
            self.config,
            self.weights,
            surgery,
            trace=trace,
            eps=self.eps,
            accumulate=self.accumulate,
        )


def split_heads(x: Tensor, heads: int) -> Tensor:
    """Reshape ``n × d`` tokens into ``heads × n × d_k``."""
    n, d = x.shape
    return np.ascontiguousarray(
        x.reshape(n, heads, d // heads).transpose(1, 0, 2)
    )


def merge_heads(x: Tensor) -> Tensor:
    """Reshape ``heads × n × d_k`` back into ``n × d`` tokens."""
    heads, n, head_dim = x.shape
    return np.ascontiguousarray(
        x.transpose(1, 0, 2).reshape(n, heads * head_dim)
    )


def attention_maps(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mode: AttentionMode,
    head_dim: int,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> AttnMaps:
    """Compute per-head attention matrices.

    All self-self variants use the same ``1 / sqrt(d_k)`` temperature as
    query-key attention.

    Parameters
    ----------
    q, k, v
        Projections shaped ``heads × n × d_k``.
    mode
        Which attention to compute.
    head_dim
        Channels per head, ``d_k``.
    accumulate
        Accumulation strategy for the score products.

    Returns
    -------
    AttnMaps
        Row-stochastic maps, or maps whose rows sum to two for
        ``qq_plus_kk``.

    Raises
    ------
    DimensionError
        Raised if the projections do not share a ``heads × n × d_k`` shape.
    """
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"Attention inputs {q.shape}, {k.shape}, {v.shape} differ"
        )
    if q.shape[-1] != head_dim:
        raise DimensionError(
            f"Head dimension {q.shape[-1]} does not match {head_dim}"
        )
    scale = 1.0 / math.sqrt(head_dim)

    def attend(a: Tensor, b: Tensor) -> Tensor:
        scores = matmul(a, b.transpose(0, 2, 1), accumulate=accumulate)
        return softmax_rows(scores, scale)

    match mode:
        case AttentionMode.QK:
            maps = attend(q, k)
        case AttentionMode.QQ:
            maps = attend(q, q)
        case AttentionMode.KK:
            maps = attend(k, k)
        case AttentionMode.VV:
            maps = attend(v, v)
        case AttentionMode.IDENTITY:
            heads, n, _ = q.shape
            eye = np.eye(n, dtype=np.float32)
            maps = np.ascontiguousarray(np.broadcast_to(eye, (heads, n, n)))
        case AttentionMode.QQ_PLUS_KK:
            maps = attend(q, q) + attend(k, k)
    return AttnMaps(maps=maps, head_dim=head_dim)


def project_attention(
    maps: AttnMaps,
    v: Tensor,
    block: BlockWeights,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> Tensor:
    """Apply attention to the values and the output projection.

    Returns
    -------
    Tensor
        ``Proj(Attn · v) + b_o`` as ``n × d`` tokens. The bias belongs to
        this branch so that the block decomposition stays additive.
    """
    mixed = merge_heads(matmul(maps.maps, v, accumulate=accumulate))
    return _linear(
        mixed, block.out_proj_weight, block.out_proj_bias, accumulate
    )


def block_forward(
    x: Tensor,
    block: BlockWeights,
    config: VitConfig,
    surgery: SurgeryConfig | None = None,
    *,
    eps: float = 1e-5,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> BlockTrace:
    """Run one residual attention block and expose its branches.

    Parameters
    ----------
    x
        Input tokens, ``(1 + hw) × d``.
    block
        Block parameters.
    config
        Encoder architecture, for the head count and activation.
    surgery
        Modifications to apply. Only passed for the last block.
    eps
        Layer-norm epsilon.
    accumulate
        Accumulation strategy for matrix products.

    Returns
    -------
    BlockTrace
        Decomposed block outputs.

    Raises
    ------
    NumericError
        Raised if any branch produces non-finite values.
    """
    d = config.width
    mode = surgery.attn_mode if surgery else AttentionMode.QK
    alpha = surgery.alpha if surgery else 1.0
    keep_residual = surgery.keep_residual if surgery else True
    keep_ffn = surgery.keep_ffn if surgery else True
    beta = surgery.beta if surgery else 0.0

    h = layer_norm(x, block.ln1_gamma, block.ln1_beta, eps)
    qkv = _linear(h, block.in_proj_weight, block.in_proj_bias, accumulate)
    q, k, v = (
        split_heads(qkv[:, i * d : (i + 1) * d], config.heads)
        for i in range(3)
    )
    maps = attention_maps(
        q, k, v, mode, config.head_dim, accumulate=accumulate
    )
    x_attn = check_finite(
        project_attention(maps, v, block, accumulate=accumulate), "attn"
    )

    # Channels are ranked on patch tokens; the class token is masked alike.
    x_res = (
        mask_top_channels(x, beta, top_channels(x[1:], beta))
        if beta > 0
        else x
    )
    scaled = np.float32(alpha) * x_attn
    x_sum = check_finite(x_res + scaled if keep_residual else scaled, "sum")

    if not keep_ffn:
        return BlockTrace(
            x_res=x_res, x_attn=x_attn, x_sum=x_sum, x_ffn=None, x_out=x_sum
        )
    hidden = _linear(
        layer_norm(x_sum, block.ln2_gamma, block.ln2_beta, eps),
        block.fc_weight,
        block.fc_bias,
        accumulate,
    )
    x_ffn = _linear(
        gelu(hidden, config.gelu_variant),
        block.proj_weight,
        block.proj_bias,
        accumulate,
    )
    x_ffn = check_finite(x_ffn, "ffn")
    return BlockTrace(
        x_res=x_res,
        x_attn=x_attn,
        x_sum=x_sum,
        x_ffn=x_ffn,
        x_out=x_sum + x_ffn,
    )


def interpolate_pos_embed(pos: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Resize positional embeddings to a new token grid.

    Parameters
    ----------
    pos
        Native embeddings, ``(1 + HW) × d`` with a square native grid.
    grid_h, grid_w
        Target token grid.

    Returns
    -------
    Tensor
        ``(1 + grid_h · grid_w) × d``. The class-token row is unchanged.

    Raises
    ------
    UnsupportedLayoutError
        Raised if the native grid is not square.
    """
    positions, d = pos.shape
    native = math.isqrt(max(positions - 1, 0))
    if positions < 2 or native * native != positions - 1:
        msg = f"Native grid of {positions - 1} positions is not square"
        raise UnsupportedLayoutError(msg)
    if (native, native) == (grid_h, grid_w):
        return pos
    spatial = pos[1:].reshape(native, native, d)
    resized = interpolate_grid(spatial, grid_h, grid_w).reshape(-1, d)
    return np.concatenate([pos[:1], resized], axis=0)


def patch_embed(
    pixels: Tensor,
    weight: Tensor,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> Tensor:
    """Embed non-overlapping patches, equivalent to a strided convolution.

    Parameters
    ----------
    pixels
        Normalized image, ``3 × H × W``.
    weight
        Kernel, ``d × 3 × p × p``.

    Returns
    -------
    Tensor
        Patch tokens in row-major grid order, ``(H/p · W/p) × d``.
    """
    d, channels, p, _ = weight.shape
    _, height, width = pixels.shape
    gh, gw = height // p, width // p
    patches = (
        pixels.reshape(channels, gh, p, gw, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, channels * p * p)
    )
    return matmul(
        np.ascontiguousarray(patches),
        weight.reshape(d, -1).T,
        accumulate=accumulate,
    )


def encode_dense(
    pixels: Tensor,
    config: VitConfig,
    weights: VitWeights,
    surgery: SurgeryConfig | None = None,
    *,
    trace: bool = False,
    eps: float = 1e-5,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> tuple[PatchEmbeddings, list[BlockTrace] | None]:
    """Encode an image into projected patch embeddings.

    The class token takes part in attention in every block and is dropped
    only after the final projection. ``LN_post`` and the projection are
    applied to every token so that patches live in the text embedding space.

    Parameters
    ----------
    pixels
        Normalized image, ``3 × H × W`` with both sides multiples of the
        patch size.
    config
        Encoder architecture.
    weights
        Encoder parameters.
    surgery
        Modifications of the last block, or `None` for plain CLIP.
    trace
        Whether to return the decomposed trace of every block.
    eps
        Layer-norm epsilon.
    accumulate
        Accumulation strategy for matrix products.

    Returns
    -------
    tuple of PatchEmbeddings and list of BlockTrace or None
        Patch embeddings, and the block traces if requested.

    Raises
    ------
    DimensionError
        Raised if the image is not ``3 × H × W`` with patch-multiple sides.
    NumericError
        Raised if any intermediate value is non-finite.
    """
    p = config.patch_size
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise DimensionError(f"Expected a 3 × H × W image, got {pixels.shape}")
    _, height, width = pixels.shape
    if height % p or width % p or height < p or width < p:
        raise DimensionError(
            f"Image size {height}×{width} is not a multiple of patch {p}"
        )
    gh, gw = height // p, width // p
    pixels = np.asarray(pixels, dtype=np.float32)

    tokens = patch_embed(pixels, weights.patch_weight, accumulate=accumulate)
    x = np.concatenate([weights.class_embedding[None, :], tokens], axis=0)
    x = x + interpolate_pos_embed(weights.positional_embedding, gh, gw)
    x = layer_norm(x, weights.ln_pre_gamma, weights.ln_pre_beta, eps)
    x = check_finite(x, "embed")

    traces: list[BlockTrace] = []
    last = len(weights.blocks) - 1
    for i, block in enumerate(weights.blocks):
        block_surgery = surgery if i == last else None
        block_trace = block_forward(
            x, block, config, block_surgery, eps=eps, accumulate=accumulate
        )
        traces.append(block_trace)
        x = block_trace.x_out

    readout = surgery.readout if surgery else Readout.OUT
    match readout:
        case Readout.OUT:
            pass
        case Readout.RES:
            x = traces[-1].x_res
        case Readout.ATTN:
            x = traces[-1].x_attn
        case Readout.SUM:
            x = traces[-1].x_sum

    x = layer_norm(x, weights.ln_post_gamma, weights.ln_post_beta, eps)
    x = matmul(x, weights.projection, accumulate=accumulate)
    x = check_finite(x, "projection")
    patches = PatchEmbeddings(
        matrix=np.ascontiguousarray(x[1:]), grid_h=gh, grid_w=gw
    )
    return patches, (traces if trace else None)


def _linear(
    x: Tensor, weight: Tensor, bias: Tensor, accumulate: Accumulation
) -> Tensor:
    return matmul(x, weight.T, accumulate=accumulate) + bias
