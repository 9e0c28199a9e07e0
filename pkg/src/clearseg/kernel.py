"""Deterministic numeric kernel used by the encoder and the statistics.

Every tensor is a C-contiguous `numpy.ndarray` of dtype float32. Functions in
this module are pure: they never modify their arguments and hold no state, so
they may be called concurrently from any number of threads.
"""

from __future__ import annotations

import math
from enum import StrEnum
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy.special import erf, expit

from .exceptions import DegenerateInputError, DimensionError, NumericError

__all__ = [
    "Accumulation",
    "GeluVariant",
    "Tensor",
    "check_finite",
    "cosine_matrix",
    "gelu",
    "interpolate_grid",
    "layer_norm",
    "matmul",
    "softmax_rows",
]

type Tensor = NDArray[np.float32]
"""Dense row-major float32 array."""

_QUICK_GELU_SCALE = 1.702


class Accumulation(StrEnum):
    """Strategy used to accumulate matrix products."""

    ORDERED = "ordered"
    """Ascending inner index, bit-identical to a naive triple loop."""

    BLAS = "blas"
    """Delegate to the BLAS library linked into numpy."""


class GeluVariant(StrEnum):
    """Activation used inside the feed-forward network."""

    QUICK = "quick"
    """``x * sigmoid(1.702 * x)``, used by OpenAI CLIP checkpoints."""

    EXACT = "exact"
    """``x * Phi(x)``, used by OpenCLIP checkpoints."""


def check_finite(x: Tensor, branch: str) -> Tensor:
    """Verify that a tensor holds only finite values.

    Parameters
    ----------
    x
        Tensor to check.
    branch
        Name of the computation that produced the tensor, used in the error.

    Returns
    -------
    Tensor
        The same tensor, for chaining.

    Raises
    ------
    NumericError
        Raised if any value is NaN or infinite.
    """
    if not np.isfinite(x).all():
        raise NumericError("Non-finite values produced", branch=branch)
    return x


def matmul(
    a: Tensor,
    b: Tensor,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> Tensor:
    """Multiply two matrices or two equal-sized stacks of matrices.

    With ordered accumulation, every output element is summed over the inner
    index in ascending order, one float32 addition at a time, so the result
    is reproducible bit for bit on any platform.

    Parameters
    ----------
    a
        Left operand, shaped ``m × k`` or ``batch × m × k``.
    b
        Right operand, shaped ``k × n`` or ``batch × k × n``.
    accumulate
        Accumulation strategy.

    Returns
    -------
    Tensor
        Product shaped ``m × n`` or ``batch × m × n``.

    Raises
    ------
    DimensionError
        Raised if the operand shapes are incompatible.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(
            f"Cannot multiply shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"Cannot multiply shapes {a.shape} and {b.shape}"
        )
    if accumulate == Accumulation.BLAS:
        return np.matmul(a, b).astype(np.float32, copy=False)
    out = np.zeros((*a.shape[:-1], b.shape[-1]), dtype=np.float32)
    for t in range(a.shape[-1]):
        out += a[..., :, t, None] * b[..., None, t, :]
    return out


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Apply a softmax along the last axis after scaling.

    Parameters
    ----------
    a
        Input logits. Any leading dimensions are treated as independent rows.
    scale
        Multiplier applied to the logits before the softmax.

    Returns
    -------
    Tensor
        Row-stochastic tensor of the same shape.
    """
    z = np.asarray(a, dtype=np.float32) * np.float32(scale)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize each slice along the last axis.

    Parameters
    ----------
    x
        Input tensor whose last dimension has size ``d``.
    gamma
        Scale, length ``d``.
    beta
        Shift, length ``d``.
    eps
        Added to the population variance inside the square root.

    Returns
    -------
    Tensor
        Normalized tensor of the same shape.

    Raises
    ------
    DimensionError
        Raised if ``gamma`` or ``beta`` do not match the last dimension.
    """
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"Layer norm parameters {gamma.shape}/{beta.shape} do not match"
            f" width {d}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + np.float32(eps))
    return normed * gamma + beta


def gelu(
    x: Tensor,
    variant: GeluVariant | Literal["quick", "exact"] = GeluVariant.QUICK,
) -> Tensor:
    """Apply a GELU-family activation elementwise.

    Parameters
    ----------
    x
        Input tensor.
    variant
        Which approximation to use.

    Returns
    -------
    Tensor
        Activated tensor.
    """
    x = np.asarray(x, dtype=np.float32)
    match GeluVariant(variant):
        case GeluVariant.QUICK:
            return x * expit(np.float32(_QUICK_GELU_SCALE) * x)
        case GeluVariant.EXACT:
            cdf = 0.5 * (1.0 + erf(x / np.float32(math.sqrt(2.0))))
            return x * cdf.astype(np.float32)


def cosine_matrix(
    a: Tensor,
    b: Tensor,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> Tensor:
    """Compute cosine similarities between every pair of rows.

    Parameters
    ----------
    a
        Matrix ``m × d``.
    b
        Matrix ``n × d``.
    accumulate
        Accumulation strategy for the underlying product.

    Returns
    -------
    Tensor
        Matrix ``m × n`` of cosines, clipped to ``[-1, 1]``.

    Raises
    ------
    DimensionError
        Raised if the embedding widths differ.
    DegenerateInputError
        Raised if any row has zero norm.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"Cannot compare rows of shapes {a.shape} and {b.shape}"
        )
    a_norm = np.linalg.norm(a, axis=1, keepdims=True)
    b_norm = np.linalg.norm(b, axis=1, keepdims=True)
    if not (a_norm > 0).all() or not (b_norm > 0).all():
        raise DegenerateInputError("Zero-norm row in cosine similarity")
    sims = matmul(a / a_norm, (b / b_norm).T, accumulate=accumulate)
    return np.clip(sims, -1.0, 1.0)


def interpolate_grid(grid: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a channels-last grid with align-corners bilinear sampling.

    Parameters
    ----------
    grid
        Tensor ``h × w × d``.
    out_h
        Output height.
    out_w
        Output width.

    Returns
    -------
    Tensor
        Tensor ``out_h × out_w × d``. Corner samples of the output coincide
        exactly with corner samples of the input.

    Raises
    ------
    DimensionError
        Raised if either target size is below one or the grid is empty.
    """
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise DimensionError(f"Cannot interpolate grid of shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"Invalid target size {out_h}×{out_w}")
    rows = _lerp_axis(grid, 0, out_h)
    return _lerp_axis(rows, 1, out_w)


def _lerp_axis(x: Tensor, axis: int, size: int) -> Tensor:
    """Linearly resample one axis with align-corners semantics."""
    n = x.shape[axis]
    if n == size:
        return x
    if size == 1 or n == 1:
        pos = np.zeros(size, dtype=np.float64)
    else:
        pos = np.arange(size, dtype=np.float64) * ((n - 1) / (size - 1))
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    weight = (pos - lo).astype(np.float32)
    shape = [1] * x.ndim
    shape[axis] = size
    weight = weight.reshape(shape)
    x_lo = np.take(x, lo, axis=axis)
    x_hi = np.take(x, hi, axis=axis)
    return x_lo + weight * (x_hi - x_lo)
