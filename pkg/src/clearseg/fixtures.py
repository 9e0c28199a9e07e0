"""Deterministic synthetic checkpoints, embeddings and images.

Values come from a SplitMix64 stream so that any implementation can
reproduce the same fixtures bit for bit. For stream index ``i`` (starting at
zero) the generator computes::

    z = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)
    u = (z >> 11) * 2**-53 * 2 - 1                    in [-1, 1)

One stream is consumed per archive, across tensors in sorted key order.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .kernel import Tensor
from .models import TextEmbeddings, VitConfig, VitWeights
from .storage import (
    checkpoint_keys,
    expected_shapes,
    save_checkpoint,
    save_text_embeddings,
    weights_from_tensors,
    write_image,
)

__all__ = [
    "DEFAULT_SCALE",
    "FixtureBundle",
    "SplitMix64",
    "gen_fixture_bundle",
    "gen_fixture_checkpoint",
    "gen_fixture_image",
    "gen_fixture_text_embeddings",
    "make_fixture_weights",
]

DEFAULT_SCALE = 0.02
"""Scale applied to uniform samples for weight tensors."""

_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based SplitMix64 stream of uniform samples in ``[-1, 1)``.

    Parameters
    ----------
    seed
        64-bit seed.
    """

    def __init__(self, seed: int) -> None:
        self._seed = np.uint64(seed % 2**64)
        self._position = 0

    def raw(self, count: int) -> NDArray[np.uint64]:
        """Return the next ``count`` raw 64-bit outputs."""
        index = np.arange(
            self._position + 1, self._position + count + 1, dtype=np.uint64
        )
        self._position += count
        with np.errstate(over="ignore"):
            z = self._seed + index * _GOLDEN_GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX_1
            z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape: Sequence[int]) -> NDArray[np.float64]:
        """Return samples in ``[-1, 1)`` with the given shape."""
        count = int(np.prod(shape, dtype=np.int64))
        mantissa = (self.raw(count) >> np.uint64(11)).astype(np.float64)
        return (mantissa * 2.0**-53 * 2.0 - 1.0).reshape(shape)


def make_fixture_weights(
    seed: int, config: VitConfig, *, scale: float = DEFAULT_SCALE
) -> VitWeights:
    """Draw encoder weights from a seeded SplitMix64 stream.

    Weight and bias tensors are ``scale * u``. Layer-norm gains are
    ``1 + scale * u`` so that normalized activations keep unit scale.

    Parameters
    ----------
    seed
        Stream seed.
    config
        Architecture to generate.
    scale
        Magnitude of the sampled values.

    Returns
    -------
    VitWeights
        Generated weights.
    """
    stream = SplitMix64(seed)
    tensors: dict[str, Tensor] = {}
    shapes = expected_shapes(config)
    for key in checkpoint_keys(config):
        values = scale * stream.uniform(shapes[key])
        if _is_layer_norm_gain(key):
            values = values + 1.0
        tensors[key] = values.astype(np.float32)
    return weights_from_tensors(config, tensors)


def gen_fixture_checkpoint(
    seed: int,
    config: VitConfig,
    path: Path,
    *,
    scale: float = DEFAULT_SCALE,
) -> tuple[VitWeights, bytes]:
    """Generate and save a synthetic checkpoint.

    The same seed and config always produce a byte-identical archive.

    Parameters
    ----------
    seed
        Stream seed.
    config
        Architecture to generate.
    path
        Destination of the safetensors archive.
    scale
        Magnitude of the sampled values.

    Returns
    -------
    tuple of VitWeights and bytes
        The generated weights and the archive contents.
    """
    weights = make_fixture_weights(seed, config, scale=scale)
    data = save_checkpoint(path, config, weights)
    return weights, data


def gen_fixture_text_embeddings(
    seed: int, class_names: Sequence[str], embed_dim: int
) -> TextEmbeddings:
    """Generate unit-norm synthetic class embeddings."""
    stream = SplitMix64(seed)
    matrix = stream.uniform((len(class_names), embed_dim))
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    return TextEmbeddings(
        matrix=matrix.astype(np.float32), class_names=tuple(class_names)
    )


def gen_fixture_image(seed: int, height: int, width: int) -> NDArray[np.uint8]:
    """Generate a deterministic RGB test image.

    The image is a smooth horizontal and vertical gradient with seeded noise,
    so that neighboring patches differ but are correlated.
    """
    stream = SplitMix64(seed)
    rows = np.linspace(0.0, 1.0, height)[:, None, None]
    cols = np.linspace(0.0, 1.0, width)[None, :, None]
    tint = np.array([1.0, 0.5, 0.0])[None, None, :]
    base = 0.5 * rows + 0.5 * np.abs(cols - tint)
    noise = 0.15 * stream.uniform((height, width, 3))
    pixels = np.clip(base + noise, 0.0, 1.0) * 255.0
    return np.round(pixels).astype(np.uint8)


def _is_layer_norm_gain(key: str) -> bool:
    return key.endswith(
        ("ln_pre.weight", "ln_post.weight", "ln_1.weight", "ln_2.weight")
    )


@dataclass(frozen=True, slots=True)
class FixtureBundle:
    """Paths of a generated fixture set."""

    checkpoint: Path
    text_embeddings: Path
    image: Path


def gen_fixture_bundle(
    seed: int,
    config: VitConfig,
    class_names: Sequence[str],
    output_dir: Path,
    image_shape: tuple[int, int],
    *,
    scale: float = DEFAULT_SCALE,
) -> FixtureBundle:
    """Write a checkpoint, matching text embeddings and a test image.

    The embeddings and image use seeds ``seed + 1`` and ``seed + 2`` so that
    no two fixtures share a stream.

    Parameters
    ----------
    seed
        Base seed.
    config
        Encoder architecture.
    class_names
        Classes of the text embeddings.
    output_dir
        Directory to write ``checkpoint.safetensors``,
        ``text.safetensors`` with its label sidecar, and ``image.png``.
    image_shape
        Height and width of the test image.
    scale
        Magnitude of the sampled weights.

    Returns
    -------
    FixtureBundle
        Paths of the written files.
    """
    bundle = FixtureBundle(
        checkpoint=output_dir / "checkpoint.safetensors",
        text_embeddings=output_dir / "text.safetensors",
        image=output_dir / "image.png",
    )
    gen_fixture_checkpoint(seed, config, bundle.checkpoint, scale=scale)
    text = gen_fixture_text_embeddings(
        seed + 1, class_names, config.embed_dim
    )
    save_text_embeddings(bundle.text_embeddings, text)
    write_image(bundle.image, gen_fixture_image(seed + 2, *image_shape))
    return bundle
