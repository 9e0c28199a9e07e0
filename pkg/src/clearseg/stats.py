"""Statistics of decomposed feature maps.

Every statistic is evaluated in float64 on a ``tokens × channels`` map.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import softmax
from scipy.stats import entropy

from .exceptions import DegenerateInputError, InputError
from .kernel import Tensor
from .models import BlockTrace, Branch, StatsRecord

__all__ = [
    "average_records",
    "channel_mean_profile",
    "frobenius_norm",
    "layer_report",
    "mask_top_channels",
    "max_activation",
    "normalized_entropy",
    "top_channels",
]


def normalized_entropy(x: Tensor) -> float:
    """Compute the normalized entropy of a feature map.

    The probabilities are a single softmax over all elements of the map, and
    the Shannon entropy is divided by the log of the element count, so the
    result lies in ``[0, 1]``.

    Raises
    ------
    DegenerateInputError
        Raised for a single-element map, whose normalizer is zero.
    """
    values = np.asarray(x, dtype=np.float64).ravel()
    if values.size < 2:
        raise DegenerateInputError("Entropy of a single-element map")
    p = softmax(values)
    return float(entropy(p) / math.log(values.size))


def frobenius_norm(x: Tensor) -> float:
    """Return the Frobenius norm of a feature map."""
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def max_activation(x: Tensor) -> float:
    """Return the largest element of a feature map."""
    return float(np.max(x))


def channel_mean_profile(x: Tensor) -> NDArray[np.float64]:
    """Return normalized per-channel means in ascending order.

    Each channel is averaged over all tokens and divided by the largest
    absolute channel mean.

    Raises
    ------
    DegenerateInputError
        Raised if every channel mean is zero.
    """
    means = np.asarray(x, dtype=np.float64).mean(axis=0)
    scale = np.abs(means).max()
    if scale == 0:
        raise DegenerateInputError("All channel means are zero")
    return np.sort(means / scale)


def top_channels(x: Tensor, beta: float) -> NDArray[np.intp]:
    """Select the ``ceil(beta · d)`` channels with the highest mean.

    Channels are ranked by raw (signed) mean over all tokens. Ties are broken
    in favor of the lower channel index.

    Raises
    ------
    InputError
        Raised if ``beta`` lies outside ``[0, 1]``.
    """
    if not 0.0 <= beta <= 1.0:
        raise InputError(f"beta must lie in [0, 1], got {beta}")
    d = x.shape[-1]
    count = min(d, math.ceil(beta * d))
    means = np.asarray(x, dtype=np.float64).mean(axis=0)
    order = np.argsort(-means, kind="stable")
    return np.sort(order[:count])


def mask_top_channels(
    x: Tensor,
    beta: float,
    channels: NDArray[np.intp] | None = None,
) -> Tensor:
    """Zero the highest-mean channels of a token matrix.

    Parameters
    ----------
    x
        Token matrix, ``tokens × d``.
    beta
        Fraction of channels to remove. Zero returns the input unchanged and
        one returns an all-zero matrix.
    channels
        Precomputed selection from `top_channels`. Masking the same matrix
        twice with the same selection gives the same result as once.

    Returns
    -------
    Tensor
        Masked copy of the input.
    """
    if channels is None:
        channels = top_channels(x, beta)
    if channels.size == 0:
        return x
    masked = np.array(x, dtype=np.float32, copy=True)
    masked[:, channels] = 0.0
    return masked


def layer_report(
    traces: Sequence[BlockTrace], *, include_class_token: bool = False
) -> list[StatsRecord]:
    """Summarize every branch of every block.

    Parameters
    ----------
    traces
        Block traces in layer order.
    include_class_token
        Whether the class token (row zero) is part of the statistics.

    Returns
    -------
    list of StatsRecord
        One record per layer and branch (``res``, ``attn``, ``sum``), with
        one-based layer numbers.

    Raises
    ------
    InputError
        Raised if no traces are given.
    """
    if not traces:
        raise InputError("No block traces to summarize")
    start = 0 if include_class_token else 1
    records = []
    for layer, trace in enumerate(traces, start=1):
        for branch in Branch:
            x = trace.branch(branch)[start:]
            records.append(
                StatsRecord(
                    layer=layer,
                    branch=branch,
                    entropy=normalized_entropy(x),
                    fro_norm=frobenius_norm(x),
                    max_value=max_activation(x),
                    channel_means=channel_mean_profile(x),
                )
            )
    return records


def average_records(
    reports: Sequence[Sequence[StatsRecord]],
) -> list[StatsRecord]:
    """Average per-image reports field by field.

    Raises
    ------
    InputError
        Raised if there are no reports or they do not line up.
    """
    if not reports:
        raise InputError("No statistics to average")
    if len({len(report) for report in reports}) != 1:
        raise InputError("Statistics reports differ in length")
    averaged = []
    for rows in zip(*reports, strict=True):
        first = rows[0]
        key = (first.layer, first.branch)
        if any((r.layer, r.branch) != key for r in rows):
            raise InputError("Statistics reports do not line up")
        averaged.append(
            StatsRecord(
                layer=first.layer,
                branch=first.branch,
                entropy=float(np.mean([r.entropy for r in rows])),
                fro_norm=float(np.mean([r.fro_norm for r in rows])),
                max_value=float(np.mean([r.max_value for r in rows])),
                channel_means=np.mean(
                    [r.channel_means for r in rows], axis=0
                ),
            )
        )
    return averaged
