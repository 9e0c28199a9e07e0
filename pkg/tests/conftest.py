"""Test fixtures for clearseg tests."""

from __future__ import annotations

from pathlib import Path

import pytest

from clearseg.encoder import VitEncoder
from clearseg.fixtures import (
    FixtureBundle,
    gen_fixture_bundle,
    gen_fixture_text_embeddings,
    make_fixture_weights,
)
from clearseg.models import TextEmbeddings, VitConfig, VitWeights

__all__ = [
    "encoder",
    "fixture_bundle",
    "fixture_config",
    "text",
    "tiny_config",
    "tiny_weights",
]

SEED = 7
"""Seed used for every shared fixture."""


@pytest.fixture
def tiny_config() -> VitConfig:
    """Return a three-layer encoder small enough for scalar references."""
    return VitConfig(
        image_size=16,
        patch_size=4,
        width=16,
        layers=3,
        heads=2,
        embed_dim=8,
    )


@pytest.fixture
def tiny_weights(tiny_config: VitConfig) -> VitWeights:
    return make_fixture_weights(SEED, tiny_config)


@pytest.fixture
def encoder(tiny_config: VitConfig, tiny_weights: VitWeights) -> VitEncoder:
    return VitEncoder(config=tiny_config, weights=tiny_weights)


@pytest.fixture
def text(tiny_config: VitConfig) -> TextEmbeddings:
    return gen_fixture_text_embeddings(
        SEED, ["sky", "grass", "road"], tiny_config.embed_dim
    )


@pytest.fixture
def fixture_config() -> VitConfig:
    """Return the architecture written by ``clearseg gen-fixture``."""
    return VitConfig(
        image_size=32,
        patch_size=8,
        width=32,
        layers=3,
        heads=2,
        embed_dim=16,
    )


@pytest.fixture
def fixture_bundle(tmp_path: Path, fixture_config: VitConfig) -> FixtureBundle:
    """Write a synthetic checkpoint, two-class embeddings and an image."""
    return gen_fixture_bundle(
        SEED,
        fixture_config,
        ["background", "object"],
        tmp_path / "fixture",
        (48, 64),
    )
