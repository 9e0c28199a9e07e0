"""Naive scalar reference forward pass of the image encoder.

Everything is computed element by element with Python floats, so it shares
no code with the numpy implementation.
"""

from __future__ import annotations

import math

import numpy as np

from clearseg.models import (
    AttentionMode,
    BlockWeights,
    Readout,
    SurgeryConfig,
    VitConfig,
    VitWeights,
)

__all__ = ["reference_encode"]

type Matrix = list[list[float]]


def _linear(x: Matrix, weight: Matrix, bias: list[float]) -> Matrix:
    return [
        [
            sum(row[k] * w_row[k] for k in range(len(row))) + b
            for w_row, b in zip(weight, bias, strict=True)
        ]
        for row in x
    ]


def _layer_norm(
    x: Matrix, gamma: list[float], beta: list[float], eps: float
) -> Matrix:
    result = []
    for row in x:
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        scale = 1.0 / math.sqrt(var + eps)
        result.append(
            [
                (v - mean) * scale * g + b
                for v, g, b in zip(row, gamma, beta, strict=True)
            ]
        )
    return result


def _gelu(v: float, variant: str) -> float:
    if variant == "exact":
        return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))
    return v / (1.0 + math.exp(-1.702 * v))


def _softmax(scores: list[float]) -> list[float]:
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def _attention(a: Matrix, b: Matrix, scale: float) -> Matrix:
    return [
        _softmax(
            [
                sum(x * y for x, y in zip(row_a, row_b, strict=True)) * scale
                for row_b in b
            ]
        )
        for row_a in a
    ]


def _block(
    x: Matrix,
    block: BlockWeights,
    config: VitConfig,
    surgery: SurgeryConfig | None,
    eps: float,
) -> dict[str, Matrix]:
    d = config.width
    dk = config.head_dim
    n = len(x)
    mode = surgery.attn_mode if surgery else AttentionMode.QK
    alpha = surgery.alpha if surgery else 1.0
    keep_residual = surgery.keep_residual if surgery else True
    keep_ffn = surgery.keep_ffn if surgery else True

    h = _layer_norm(
        x, block.ln1_gamma.tolist(), block.ln1_beta.tolist(), eps
    )
    qkv = _linear(
        h, block.in_proj_weight.tolist(), block.in_proj_bias.tolist()
    )
    mixed = [[0.0] * d for _ in range(n)]
    for head in range(config.heads):
        cols = range(head * dk, (head + 1) * dk)
        q = [[row[c] for c in cols] for row in qkv]
        k = [[row[d + c] for c in cols] for row in qkv]
        v = [[row[2 * d + c] for c in cols] for row in qkv]
        scale = 1.0 / math.sqrt(dk)
        match mode:
            case AttentionMode.QK:
                attn = _attention(q, k, scale)
            case AttentionMode.QQ:
                attn = _attention(q, q, scale)
            case AttentionMode.KK:
                attn = _attention(k, k, scale)
            case AttentionMode.VV:
                attn = _attention(v, v, scale)
            case AttentionMode.IDENTITY:
                attn = [[float(i == j) for j in range(n)] for i in range(n)]
            case AttentionMode.QQ_PLUS_KK:
                qq = _attention(q, q, scale)
                kk = _attention(k, k, scale)
                attn = [
                    [a + b for a, b in zip(ra, rb, strict=True)]
                    for ra, rb in zip(qq, kk, strict=True)
                ]
        for i in range(n):
            for c_out, c in enumerate(cols):
                mixed[i][c] = sum(attn[i][j] * v[j][c_out] for j in range(n))

    x_attn = _linear(
        mixed, block.out_proj_weight.tolist(), block.out_proj_bias.tolist()
    )
    if keep_residual:
        x_sum = [
            [r + alpha * a for r, a in zip(rr, ra, strict=True)]
            for rr, ra in zip(x, x_attn, strict=True)
        ]
    else:
        x_sum = [[alpha * a for a in ra] for ra in x_attn]
    x_out = x_sum
    if keep_ffn:
        h2 = _layer_norm(
            x_sum, block.ln2_gamma.tolist(), block.ln2_beta.tolist(), eps
        )
        hidden = _linear(
            h2, block.fc_weight.tolist(), block.fc_bias.tolist()
        )
        variant = config.gelu_variant.value
        act = [[_gelu(v, variant) for v in row] for row in hidden]
        ffn = _linear(
            act, block.proj_weight.tolist(), block.proj_bias.tolist()
        )
        x_out = [
            [s + f for s, f in zip(rs, rf, strict=True)]
            for rs, rf in zip(x_sum, ffn, strict=True)
        ]
    return {"res": x, "attn": x_attn, "sum": x_sum, "out": x_out}


def reference_encode(
    pixels: np.ndarray,
    config: VitConfig,
    weights: VitWeights,
    surgery: SurgeryConfig | None = None,
    eps: float = 1e-5,
) -> np.ndarray:
    """Encode an image at the checkpoint-native grid size.

    Returns the projected patch embeddings as a float64 array, class token
    dropped.
    """
    p = config.patch_size
    _, height, width = pixels.shape
    assert height == width == config.image_size
    grid = config.grid_size
    image = pixels.tolist()
    kernel = weights.patch_weight.tolist()

    tokens = [weights.class_embedding.tolist()]
    for gi in range(grid):
        for gj in range(grid):
            tokens.append(
                [
                    sum(
                        kernel[o][c][y][xx]
                        * image[c][gi * p + y][gj * p + xx]
                        for c in range(3)
                        for y in range(p)
                        for xx in range(p)
                    )
                    for o in range(config.width)
                ]
            )
    pos = weights.positional_embedding.tolist()
    x = [
        [t + q for t, q in zip(row, pos_row, strict=True)]
        for row, pos_row in zip(tokens, pos, strict=True)
    ]
    x = _layer_norm(
        x, weights.ln_pre_gamma.tolist(), weights.ln_pre_beta.tolist(), eps
    )
    last = len(weights.blocks) - 1
    branches: dict[str, Matrix] = {}
    for i, block in enumerate(weights.blocks):
        block_surgery = surgery if i == last else None
        branches = _block(x, block, config, block_surgery, eps)
        x = branches["out"]

    readout = surgery.readout if surgery else Readout.OUT
    x = branches[readout.value]
    x = _layer_norm(
        x, weights.ln_post_gamma.tolist(), weights.ln_post_beta.tolist(), eps
    )
    proj = weights.projection.tolist()
    out = [
        [
            sum(row[k] * proj[k][e] for k in range(config.width))
            for e in range(config.embed_dim)
        ]
        for row in x
    ]
    return np.array(out[1:], dtype=np.float64)
