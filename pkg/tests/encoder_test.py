"""Tests for the ViT encoder and last-block surgery."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from clearseg.encoder import (
    VitEncoder,
    attention_maps,
    block_forward,
    interpolate_pos_embed,
    merge_heads,
    project_attention,
    split_heads,
)
from clearseg.exceptions import (
    DimensionError,
    NumericError,
    UnsupportedLayoutError,
)
from clearseg.fixtures import make_fixture_weights
from clearseg.kernel import GeluVariant, layer_norm, matmul
from clearseg.models import (
    PRESETS,
    VANILLA,
    AttentionMode,
    AttnMaps,
    Readout,
    SurgeryConfig,
    TextEmbeddings,
    VitConfig,
    VitWeights,
)
from clearseg.segmentation import classify_patches
from clearseg.stats import mask_top_channels, top_channels

from .support.golden import assert_golden_table
from .support.reference import reference_encode


def _pixels(seed: int, height: int, width: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((3, height, width)).astype(np.float32)


def _qkv(
    x: np.ndarray, weights: VitWeights, config: VitConfig, index: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    block = weights.blocks[index]
    h = layer_norm(x, block.ln1_gamma, block.ln1_beta)
    qkv = matmul(h, block.in_proj_weight.T) + block.in_proj_bias
    d = config.width
    q, k, v = (
        split_heads(qkv[:, i * d : (i + 1) * d], config.heads)
        for i in range(3)
    )
    return q, k, v


def test_matches_scalar_reference() -> None:
    rng = np.random.default_rng(2024)
    presets = [None, *PRESETS.values()]
    for trial in range(50):
        heads = int(rng.choice([1, 2, 4]))
        width = heads * int(rng.choice([2, 4, 8]))
        patch = int(rng.choice([2, 4]))
        grid = int(rng.choice([2, 3]))
        config = VitConfig(
            image_size=patch * grid,
            patch_size=patch,
            width=width,
            layers=int(rng.integers(1, 4)),
            heads=heads,
            embed_dim=int(rng.choice([4, 8])),
            gelu_variant=GeluVariant(rng.choice(["quick", "exact"])),
        )
        weights = make_fixture_weights(trial, config, scale=0.1)
        surgery = presets[trial % len(presets)]
        pixels = _pixels(trial, config.image_size, config.image_size)

        encoder = VitEncoder(config=config, weights=weights)
        patches, _ = encoder.encode_dense(pixels, surgery)
        expected = reference_encode(pixels, config, weights, surgery)

        assert patches.matrix.shape == expected.shape
        error = np.linalg.norm(patches.matrix - expected)
        assert error / np.linalg.norm(expected) < 1e-5, (trial, config)


def test_block_decomposition(encoder: VitEncoder) -> None:
    pixels = _pixels(1, 16, 16)
    _, traces = encoder.encode_dense(pixels, trace=True)
    assert traces is not None
    assert len(traces) == 3
    for trace in traces:
        assert np.array_equal(trace.x_sum, trace.x_res + trace.x_attn)
        assert trace.x_ffn is not None
        assert np.array_equal(trace.x_out, trace.x_sum + trace.x_ffn)
    for before, after in zip(traces, traces[1:], strict=False):
        assert np.array_equal(after.x_res, before.x_out)


def test_vanilla_preset_is_plain_clip(encoder: VitEncoder) -> None:
    pixels = _pixels(2, 16, 16)
    plain, _ = encoder.encode_dense(pixels)
    vanilla, _ = encoder.encode_dense(pixels, VANILLA)
    assert np.array_equal(plain.matrix, vanilla.matrix)


def test_surgery_golden(
    encoder: VitEncoder, text: TextEmbeddings, tmp_path: Path
) -> None:
    pixels = _pixels(12, 16, 16)
    columns: dict[str, np.ndarray] = {}
    presets = {"vanilla": VANILLA, "clearclip": SurgeryConfig()}
    for name, surgery in presets.items():
        patches, _ = encoder.encode_dense(pixels, surgery)
        logits = classify_patches(patches, text).reshape(text.num_classes, -1)
        columns[f"{name}_class"] = logits.argmax(axis=0)
        columns[f"{name}_logit"] = logits.max(axis=0).astype(np.float64)
    assert not np.array_equal(
        columns["vanilla_logit"], columns["clearclip_logit"]
    )

    path = tmp_path / "surgery.csv"
    pd.DataFrame({"patch": np.arange(16), **columns}).to_csv(
        path, index=False
    )
    assert_golden_table("encoder-surgery.csv", path, atol=1e-5)


def test_surgery_output_is_projected_attention(
    encoder: VitEncoder, tiny_config: VitConfig, tiny_weights: VitWeights
) -> None:
    pixels = _pixels(3, 16, 16)
    _, traces = encoder.encode_dense(pixels, SurgeryConfig(), trace=True)
    assert traces is not None
    last = traces[-1]
    assert last.x_ffn is None
    assert np.array_equal(last.x_out, last.x_attn)
    assert np.array_equal(last.x_sum, last.x_attn)

    q, k, v = _qkv(traces[-2].x_out, tiny_weights, tiny_config, 2)
    maps = attention_maps(q, k, v, AttentionMode.QQ, tiny_config.head_dim)
    expected = project_attention(maps, v, tiny_weights.blocks[2])
    assert np.array_equal(last.x_out, expected)


def test_projection_is_linear(
    tiny_config: VitConfig, tiny_weights: VitWeights
) -> None:
    rng = np.random.default_rng(4)
    n, heads, dk = 5, tiny_config.heads, tiny_config.head_dim
    q, k, v1, v2 = (
        rng.standard_normal((heads, n, dk)).astype(np.float32)
        for _ in range(4)
    )
    block = tiny_weights.blocks[0]
    maps = attention_maps(q, k, v1, AttentionMode.QK, dk)
    a, b = np.float32(0.7), np.float32(-1.3)
    combined = project_attention(maps, a * v1 + b * v2, block)
    bias = block.out_proj_bias
    expected = (
        a * (project_attention(maps, v1, block) - bias)
        + b * (project_attention(maps, v2, block) - bias)
        + bias
    )
    np.testing.assert_allclose(combined, expected, rtol=1e-5, atol=1e-6)


def test_projection_is_linear_in_maps(
    tiny_config: VitConfig, tiny_weights: VitWeights
) -> None:
    rng = np.random.default_rng(11)
    n, heads, dk = 5, tiny_config.heads, tiny_config.head_dim
    q, k, v = (
        rng.standard_normal((heads, n, dk)).astype(np.float32)
        for _ in range(3)
    )
    qq = attention_maps(q, k, v, AttentionMode.QQ, dk)
    kk = attention_maps(q, k, v, AttentionMode.KK, dk)
    both = attention_maps(q, k, v, AttentionMode.QQ_PLUS_KK, dk)
    np.testing.assert_allclose(
        both.maps, qq.maps + kk.maps, rtol=1e-6, atol=1e-7
    )

    block = tiny_weights.blocks[2]
    bias = block.out_proj_bias
    expected = (
        project_attention(qq, v, block)
        + project_attention(kk, v, block)
        - bias
    )
    np.testing.assert_allclose(
        project_attention(both, v, block), expected, rtol=1e-5, atol=1e-5
    )
    summed = AttnMaps(maps=qq.maps + kk.maps, head_dim=dk)
    np.testing.assert_allclose(
        project_attention(summed, v, block), expected, rtol=1e-5, atol=1e-5
    )


def test_identity_attention_reduces_to_value_projection(
    tiny_weights: VitWeights,
) -> None:
    rng = np.random.default_rng(5)
    q, k, v = (
        rng.standard_normal((2, 6, 8)).astype(np.float32) for _ in range(3)
    )
    maps = attention_maps(q, k, v, AttentionMode.IDENTITY, 8)
    assert np.array_equal(maps.maps[1], np.eye(6, dtype=np.float32))
    block = tiny_weights.blocks[0]
    result = project_attention(maps, v, block)
    expected = matmul(merge_heads(v), block.out_proj_weight.T)
    assert np.array_equal(result, expected + block.out_proj_bias)


def test_attention_row_sums() -> None:
    rng = np.random.default_rng(6)
    q, k, v = (
        rng.standard_normal((2, 5, 4)).astype(np.float32) for _ in range(3)
    )
    for mode in (AttentionMode.QK, AttentionMode.QQ, AttentionMode.VV):
        maps = attention_maps(q, k, v, mode, 4).maps
        np.testing.assert_allclose(maps.sum(axis=-1), 1.0, rtol=1e-6)
    both = attention_maps(q, k, v, AttentionMode.QQ_PLUS_KK, 4).maps
    np.testing.assert_allclose(both.sum(axis=-1), 2.0, rtol=1e-6)

    with pytest.raises(DimensionError):
        attention_maps(q, k[:, :4], v, AttentionMode.QK, 4)
    with pytest.raises(DimensionError):
        attention_maps(q, k, v, AttentionMode.QK, 8)


def test_split_merge_heads() -> None:
    x = np.arange(24, dtype=np.float32).reshape(3, 8)
    heads = split_heads(x, 2)
    assert heads.shape == (2, 3, 4)
    assert np.array_equal(heads[1, 0], x[0, 4:])
    assert np.array_equal(merge_heads(heads), x)


def test_residual_channel_masking(
    encoder: VitEncoder, tiny_config: VitConfig, tiny_weights: VitWeights
) -> None:
    pixels = _pixels(7, 16, 16)
    surgery = SurgeryConfig(keep_residual=True, beta=0.25)
    _, traces = encoder.encode_dense(pixels, surgery, trace=True)
    assert traces is not None
    x = traces[-2].x_out
    masked = mask_top_channels(x, 0.25, top_channels(x[1:], 0.25))
    assert np.array_equal(traces[-1].x_res, masked)
    assert np.count_nonzero(masked.any(axis=0)) == tiny_config.width - 4
    assert np.array_equal(
        traces[-1].x_sum, traces[-1].x_res + traces[-1].x_attn
    )

    direct = block_forward(
        traces[-2].x_out, tiny_weights.blocks[2], tiny_config, surgery
    )
    assert np.array_equal(direct.x_out, traces[-1].x_out)


def test_channel_masking_ranks_patch_tokens(
    tiny_config: VitConfig, tiny_weights: VitWeights
) -> None:
    x = np.zeros((5, tiny_config.width), dtype=np.float32)
    x[1:, 3] = 5.0
    x[0, 0] = 100.0
    surgery = SurgeryConfig(keep_residual=True, beta=1 / 16)
    trace = block_forward(x, tiny_weights.blocks[0], tiny_config, surgery)

    assert not trace.x_res[:, 3].any()
    assert trace.x_res[0, 0] == 100.0
    assert np.count_nonzero(trace.x_res) == 1


def test_readout(encoder: VitEncoder) -> None:
    pixels = _pixels(8, 16, 16)
    out, _ = encoder.encode_dense(pixels, SurgeryConfig())
    summed, _ = encoder.encode_dense(
        pixels, SurgeryConfig(readout=Readout.SUM)
    )
    assert np.array_equal(out.matrix, summed.matrix)

    residual, _ = encoder.encode_dense(
        pixels, SurgeryConfig(keep_residual=True, readout=Readout.RES)
    )
    assert not np.array_equal(out.matrix, residual.matrix)


def test_variable_input_size(encoder: VitEncoder) -> None:
    patches, _ = encoder.encode_dense(_pixels(9, 16, 24))
    assert (patches.grid_h, patches.grid_w) == (4, 6)
    assert patches.matrix.shape == (24, 8)

    with pytest.raises(DimensionError):
        encoder.encode_dense(_pixels(9, 15, 16))
    with pytest.raises(DimensionError):
        encoder.encode_dense(np.zeros((1, 16, 16), dtype=np.float32))


def test_interpolate_pos_embed(tiny_weights: VitWeights) -> None:
    pos = tiny_weights.positional_embedding
    assert interpolate_pos_embed(pos, 4, 4) is pos
    resized = interpolate_pos_embed(pos, 2, 7)
    assert resized.shape == (15, 16)
    assert np.array_equal(resized[0], pos[0])
    assert np.array_equal(resized[1], pos[1])
    assert np.array_equal(resized[-1], pos[-1])

    # Native 2×2 grid [[0, 2], [4, 8]] resized to two rows of three.
    small = np.array([[9], [0], [2], [4], [8]], dtype=np.float32)
    widened = interpolate_pos_embed(small, 2, 3)
    assert np.array_equal(
        widened, np.array([[9], [0], [1], [2], [4], [6], [8]], np.float32)
    )

    with pytest.raises(UnsupportedLayoutError):
        interpolate_pos_embed(pos[:-1], 4, 4)


def test_non_finite_input(encoder: VitEncoder) -> None:
    pixels = _pixels(10, 16, 16)
    pixels[0, 0, 0] = np.nan
    with pytest.raises(NumericError) as excinfo:
        encoder.encode_dense(pixels)
    assert excinfo.value.exit_code == 4
