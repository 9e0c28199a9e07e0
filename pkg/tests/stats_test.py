"""Tests for feature map statistics."""

from __future__ import annotations

import math

import numpy as np
import pytest

from clearseg.encoder import VitEncoder
from clearseg.exceptions import DegenerateInputError, InputError
from clearseg.models import Branch, StatsRecord
from clearseg.stats import (
    average_records,
    channel_mean_profile,
    frobenius_norm,
    layer_report,
    mask_top_channels,
    max_activation,
    normalized_entropy,
    top_channels,
)


def test_normalized_entropy() -> None:
    for shape in ((2, 2), (7, 3), (50, 16)):
        x = np.full(shape, 0.3, dtype=np.float32)
        assert abs(normalized_entropy(x) - 1.0) <= 1e-6

    peak = np.array([[0, 0], [0, 100]], dtype=np.float32)
    assert 0.0 <= normalized_entropy(peak) <= 1e-6

    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.standard_normal((6, 5)).astype(np.float32) * 5
        assert 0.0 <= normalized_entropy(x) <= 1.0 + 1e-6

    with pytest.raises(DegenerateInputError):
        normalized_entropy(np.ones((1, 1), dtype=np.float32))


def test_frobenius_norm() -> None:
    assert frobenius_norm(np.zeros((3, 4), dtype=np.float32)) == 0.0
    eye = np.eye(5, dtype=np.float32)
    assert frobenius_norm(eye) == pytest.approx(math.sqrt(5), abs=1e-12)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((8, 6)).astype(np.float32)
    assert abs(frobenius_norm(2 * x) - 2 * frobenius_norm(x)) <= 1e-6


def test_max_activation() -> None:
    assert max_activation(np.full((3, 3), -2.5, dtype=np.float32)) == -2.5
    x = np.zeros((4, 4), dtype=np.float32)
    x[2, 1] = 90
    assert max_activation(x) == 90

    rng = np.random.default_rng(13)
    x = rng.standard_normal((9, 7)).astype(np.float32)
    best = -math.inf
    for value in x.ravel().tolist():
        best = max(best, value)
    assert max_activation(x) == best


def test_channel_mean_profile() -> None:
    constant = np.full((4, 3), 2.0, dtype=np.float32)
    assert channel_mean_profile(constant).tolist() == [1.0, 1.0, 1.0]

    x = np.array([[1.0, 2.0], [1.0, 4.0]], dtype=np.float32)
    np.testing.assert_allclose(channel_mean_profile(x), [1 / 3, 1.0])

    rng = np.random.default_rng(14)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    profile = channel_mean_profile(x)
    assert np.all(np.diff(profile) >= 0)
    permuted = x[:, rng.permutation(8)]
    assert np.array_equal(channel_mean_profile(permuted), profile)

    with pytest.raises(DegenerateInputError):
        channel_mean_profile(np.zeros((3, 2), dtype=np.float32))


def test_mask_top_channels() -> None:
    rng = np.random.default_rng(15)
    x = rng.standard_normal((6, 8)).astype(np.float32)
    assert np.array_equal(mask_top_channels(x, 0.0), x)
    assert np.array_equal(mask_top_channels(x, 1.0), np.zeros_like(x))

    x = np.array(
        [[1.0, 5.0, 3.0, 5.0], [1.0, 5.0, 3.0, 5.0]], dtype=np.float32
    )
    assert top_channels(x, 0.25).tolist() == [1]
    assert top_channels(x, 0.5).tolist() == [1, 3]
    assert top_channels(x, 0.6).tolist() == [1, 2, 3]
    masked = mask_top_channels(x, 0.5)
    assert masked[:, [1, 3]].max() == 0.0
    assert np.array_equal(masked[:, [0, 2]], x[:, [0, 2]])
    assert np.array_equal(x[:, 1], [5.0, 5.0])

    channels = top_channels(x, 0.5)
    once = mask_top_channels(x, 0.5, channels)
    assert np.array_equal(mask_top_channels(once, 0.5, channels), once)

    with pytest.raises(InputError):
        top_channels(x, 1.5)


def test_layer_report(encoder: VitEncoder) -> None:
    pixels = np.random.default_rng(16).standard_normal((3, 16, 16))
    _, traces = encoder.encode_dense(pixels.astype(np.float32), trace=True)
    assert traces is not None
    records = layer_report(traces)
    assert len(records) == 9
    assert [(r.layer, r.branch) for r in records[:3]] == [
        (1, Branch.RES),
        (1, Branch.ATTN),
        (1, Branch.SUM),
    ]
    last = records[-1]
    assert (last.layer, last.branch) == (3, Branch.SUM)
    patches = traces[-1].x_sum[1:]
    assert last.entropy == normalized_entropy(patches)
    assert last.fro_norm == frobenius_norm(patches)
    assert last.max_value == max_activation(patches)
    assert np.array_equal(last.channel_means, channel_mean_profile(patches))

    with_class = layer_report(traces, include_class_token=True)
    assert with_class[-1].fro_norm == frobenius_norm(traces[-1].x_sum)

    with pytest.raises(InputError):
        layer_report([])


def test_average_records() -> None:
    def record(value: float) -> StatsRecord:
        return StatsRecord(
            layer=1,
            branch=Branch.RES,
            entropy=value,
            fro_norm=2 * value,
            max_value=value,
            channel_means=np.array([value, 1.0]),
        )

    averaged = average_records([[record(0.2)], [record(0.4)]])
    assert len(averaged) == 1
    assert averaged[0].entropy == pytest.approx(0.3)
    assert averaged[0].fro_norm == pytest.approx(0.6)
    np.testing.assert_allclose(averaged[0].channel_means, [0.3, 1.0])

    same = average_records([[record(0.2)], [record(0.2)]])
    assert same[0].entropy == 0.2

    with pytest.raises(InputError):
        average_records([])
    with pytest.raises(InputError):
        average_records([[record(0.2)], []])
