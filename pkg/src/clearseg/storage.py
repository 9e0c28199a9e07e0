"""Storage layer for checkpoints, embeddings, images, and result files.

Checkpoints and embedding matrices are safetensors archives. Tensor names
follow the OpenAI CLIP visual tower; archives using other names are read
through a remap table of ``{expected_key: archive_key}``.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile
from collections.abc import Callable, Mapping
from pathlib import Path

import numpy as np
import pandas as pd
import structlog
from numpy.typing import NDArray
from PIL import Image
from pydantic import BaseModel, TypeAdapter, ValidationError
from safetensors import SafetensorError, safe_open
from safetensors.numpy import load_file, save

from .exceptions import (
    CheckpointError,
    ConsistencyError,
    DegenerateInputError,
    InputError,
    MissingKeyError,
    ShapeMismatchError,
    UnsupportedLayoutError,
)
from .kernel import GeluVariant, Tensor
from .models import BlockWeights, TextEmbeddings, VitConfig, VitWeights

__all__ = [
    "TEXT_EMBEDDINGS_KEY",
    "atomic_write",
    "checkpoint_keys",
    "expected_shapes",
    "labels_path",
    "load_checkpoint",
    "load_key_map",
    "load_text_embeddings",
    "read_image",
    "read_label_png",
    "save_checkpoint",
    "save_logits",
    "save_text_embeddings",
    "tensors_from_weights",
    "weights_from_tensors",
    "write_image",
    "write_json",
    "write_label_png",
    "write_table",
]

TEXT_EMBEDDINGS_KEY = "text_embeddings"
"""Archive key holding the class embedding matrix."""

_METADATA_KEY = "clearseg"
_NORM_TOLERANCE = 1e-4
_MAX_LABEL = 254

_BLOCK_PREFIX = "visual.transformer.resblocks"

_BLOCK_FIELDS = {
    "ln1_gamma": "ln_1.weight",
    "ln1_beta": "ln_1.bias",
    "in_proj_weight": "attn.in_proj_weight",
    "in_proj_bias": "attn.in_proj_bias",
    "out_proj_weight": "attn.out_proj.weight",
    "out_proj_bias": "attn.out_proj.bias",
    "ln2_gamma": "ln_2.weight",
    "ln2_beta": "ln_2.bias",
    "fc_weight": "mlp.c_fc.weight",
    "fc_bias": "mlp.c_fc.bias",
    "proj_weight": "mlp.c_proj.weight",
    "proj_bias": "mlp.c_proj.bias",
}

_TOP_FIELDS = {
    "patch_weight": "visual.conv1.weight",
    "class_embedding": "visual.class_embedding",
    "positional_embedding": "visual.positional_embedding",
    "ln_pre_gamma": "visual.ln_pre.weight",
    "ln_pre_beta": "visual.ln_pre.bias",
    "ln_post_gamma": "visual.ln_post.weight",
    "ln_post_beta": "visual.ln_post.bias",
    "projection": "visual.proj",
}


def _block_key(index: int, suffix: str) -> str:
    return f"{_BLOCK_PREFIX}.{index}.{suffix}"


def expected_shapes(config: VitConfig) -> dict[str, tuple[int, ...]]:
    """Return the shape of every tensor required by an architecture.

    Parameters
    ----------
    config
        Encoder architecture.

    Returns
    -------
    dict of str to tuple of int
        Mapping from OpenAI CLIP key name to tensor shape.
    """
    d = config.width
    p = config.patch_size
    hidden = config.mlp_width
    shapes: dict[str, tuple[int, ...]] = {
        "visual.conv1.weight": (d, 3, p, p),
        "visual.class_embedding": (d,),
        "visual.positional_embedding": (1 + config.grid_size**2, d),
        "visual.ln_pre.weight": (d,),
        "visual.ln_pre.bias": (d,),
        "visual.ln_post.weight": (d,),
        "visual.ln_post.bias": (d,),
        "visual.proj": (d, config.embed_dim),
    }
    block_shapes = {
        "ln_1.weight": (d,),
        "ln_1.bias": (d,),
        "attn.in_proj_weight": (3 * d, d),
        "attn.in_proj_bias": (3 * d,),
        "attn.out_proj.weight": (d, d),
        "attn.out_proj.bias": (d,),
        "ln_2.weight": (d,),
        "ln_2.bias": (d,),
        "mlp.c_fc.weight": (hidden, d),
        "mlp.c_fc.bias": (hidden,),
        "mlp.c_proj.weight": (d, hidden),
        "mlp.c_proj.bias": (d,),
    }
    for i in range(config.layers):
        for suffix, shape in block_shapes.items():
            shapes[_block_key(i, suffix)] = shape
    return shapes


def checkpoint_keys(config: VitConfig) -> list[str]:
    """Return the required tensor keys in sorted order."""
    return sorted(expected_shapes(config))


def load_key_map(path: Path) -> dict[str, str]:
    """Read a JSON remap table of ``{expected_key: archive_key}``.

    Raises
    ------
    InputError
        Raised if the file is not a JSON object of strings.
    """
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return TypeAdapter(dict[str, str]).validate_python(data)
    except (OSError, ValueError, ValidationError) as e:
        raise InputError(f"Invalid key map {path}: {e}") from e


def load_checkpoint(
    path: Path,
    key_map: Mapping[str, str] | None = None,
    *,
    gelu_variant: GeluVariant | None = None,
) -> tuple[VitConfig, VitWeights]:
    """Load the image encoder of a CLIP checkpoint.

    The architecture is inferred from tensor shapes. The number of heads and
    the activation cannot be inferred from shapes, so they are read from the
    archive metadata if present and otherwise default to ``width // 64`` and
    QuickGELU, the OpenAI CLIP conventions.

    Parameters
    ----------
    path
        Path to the safetensors archive.
    key_map
        Optional mapping from expected key to the name used in the archive.
    gelu_variant
        Override for the feed-forward activation.

    Returns
    -------
    tuple of VitConfig and VitWeights
        Inferred architecture and its weights, upcast to float32.

    Raises
    ------
    CheckpointError
        Raised if the archive cannot be parsed, a required key is missing
        (`MissingKeyError`), or a tensor has the wrong shape
        (`ShapeMismatchError`).
    """
    key_map = key_map or {}
    try:
        with safe_open(str(path), framework="np") as archive:
            available = set(archive.keys())
            metadata = archive.metadata() or {}

            def get(key: str) -> Tensor:
                archive_key = key_map.get(key, key)
                if archive_key not in available:
                    raise MissingKeyError(key)
                return _as_float32(key, archive.get_tensor(archive_key))

            config = _infer_config(get, available, key_map, metadata)
            if gelu_variant:
                config = config.model_copy(
                    update={"gelu_variant": gelu_variant}
                )
            tensors = {}
            for key, shape in expected_shapes(config).items():
                tensor = get(key)
                if tensor.shape != shape:
                    raise ShapeMismatchError(key, shape, tensor.shape)
                tensors[key] = tensor
    except (SafetensorError, OSError, TypeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return config, weights_from_tensors(config, tensors)


def save_checkpoint(
    path: Path, config: VitConfig, weights: VitWeights
) -> bytes:
    """Write encoder weights as a safetensors archive.

    The heads count, activation and native image size are stored in the
    archive metadata so that `load_checkpoint` recovers the same config.

    Returns
    -------
    bytes
        The archive contents, as written.
    """
    tensors = tensors_from_weights(weights)
    for key, shape in expected_shapes(config).items():
        if tensors[key].shape != shape:
            raise ShapeMismatchError(key, shape, tensors[key].shape)
    metadata = json.dumps(
        {
            "gelu_variant": config.gelu_variant.value,
            "heads": config.heads,
            "image_size": config.image_size,
        },
        sort_keys=True,
    )
    data = save(tensors, metadata={_METADATA_KEY: metadata})
    atomic_write(path, data)
    return data


def labels_path(path: Path) -> Path:
    """Return the class-name sidecar path for an embedding archive."""
    return path.with_suffix(".labels.json")


def load_text_embeddings(path: Path) -> TextEmbeddings:
    """Load precomputed class text embeddings.

    Rows are re-normalized to unit L2 norm unconditionally. Prompt averaging
    happens upstream, so a row whose norm is off by more than 1e-4 is logged
    as a warning before being normalized.

    Parameters
    ----------
    path
        Safetensors archive holding a ``C × embed_dim`` matrix under
        ``text_embeddings`` (or as its only tensor), next to a
        ``.labels.json`` sidecar listing the class names in row order.

    Returns
    -------
    TextEmbeddings
        Normalized embeddings.

    Raises
    ------
    CheckpointError
        Raised if the archive or sidecar cannot be read.
    ConsistencyError
        Raised if the row count differs from the number of class names.
    DegenerateInputError
        Raised if any row has zero norm.
    """
    sidecar = labels_path(path)
    try:
        tensors = load_file(str(path))
        names = TypeAdapter(list[str]).validate_json(
            sidecar.read_bytes()
        )
    except (SafetensorError, OSError, ValidationError) as e:
        raise CheckpointError(f"Cannot read text embeddings: {e}") from e
    if TEXT_EMBEDDINGS_KEY in tensors:
        matrix = tensors[TEXT_EMBEDDINGS_KEY]
    elif len(tensors) == 1:
        matrix = next(iter(tensors.values()))
    else:
        raise MissingKeyError(TEXT_EMBEDDINGS_KEY)
    matrix = _as_float32(TEXT_EMBEDDINGS_KEY, matrix)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        msg = f"Text embeddings must be a non-empty matrix, got {matrix.shape}"
        raise ConsistencyError(msg)
    if matrix.shape[0] != len(names):
        msg = (
            f"{matrix.shape[0]} embedding rows but {len(names)} class names"
            f" in {sidecar}"
        )
        raise ConsistencyError(msg)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if not (norms > 0).all():
        bad = int(np.flatnonzero(norms == 0)[0])
        msg = f"Text embedding for class {names[bad]!r} has zero norm"
        raise DegenerateInputError(msg)
    off = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOLERANCE)
    if off.size:
        logger = structlog.get_logger("clearseg")
        logger.warning(
            "Re-normalizing text embeddings",
            path=str(path),
            classes=[names[i] for i in off],
        )
    normalized = (matrix / norms[:, None]).astype(np.float32)
    return TextEmbeddings(matrix=normalized, class_names=tuple(names))


def save_text_embeddings(path: Path, embeddings: TextEmbeddings) -> None:
    """Write text embeddings and their class-name sidecar."""
    data = save({TEXT_EMBEDDINGS_KEY: embeddings.matrix})
    atomic_write(path, data)
    names = json.dumps(list(embeddings.class_names), ensure_ascii=False)
    atomic_write(labels_path(path), names.encode())


def read_image(path: Path) -> NDArray[np.uint8]:
    """Read an image file as ``H × W × 3`` RGB bytes.

    Raises
    ------
    InputError
        Raised if the file cannot be decoded.
    """
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()
    except OSError as e:
        raise InputError(f"Cannot read image {path}: {e}") from e


def read_label_png(path: Path) -> NDArray[np.int64]:
    """Read a single-channel label map.

    Grayscale and palette PNGs are accepted; in both cases the stored index
    is the class label.

    Raises
    ------
    InputError
        Raised if the file cannot be read or has more than one channel.
    """
    try:
        with Image.open(path) as image:
            if image.mode not in ("L", "P"):
                msg = f"Label map {path} has mode {image.mode}, expected L"
                raise InputError(msg)
            return np.asarray(image, dtype=np.int64).copy()
    except OSError as e:
        raise InputError(f"Cannot read label map {path}: {e}") from e


def write_image(path: Path, image: NDArray[np.uint8]) -> None:
    """Write ``H × W × 3`` RGB bytes as a PNG."""
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG")
    atomic_write(path, buffer.getvalue())


def write_label_png(path: Path, labels: NDArray[np.integer]) -> None:
    """Write a label map as an 8-bit grayscale PNG.

    Raises
    ------
    InputError
        Raised if a label does not fit below the ignore index.
    """
    if labels.size and (labels.min() < 0 or labels.max() > _MAX_LABEL):
        msg = f"Labels must lie in [0, {_MAX_LABEL}] to be stored as PNG"
        raise InputError(msg)
    buffer = io.BytesIO()
    Image.fromarray(labels.astype(np.uint8)).save(buffer, format="PNG")
    atomic_write(path, buffer.getvalue())


def save_logits(path: Path, logits: Tensor) -> None:
    """Write a ``C × H × W`` logit map as a safetensors archive."""
    atomic_write(path, save({"logits": np.ascontiguousarray(logits)}))


def write_table(path: Path, table: pd.DataFrame) -> None:
    """Write a table as UTF-8 CSV with a header row."""
    text = table.to_csv(index=False, lineterminator="\n")
    atomic_write(path, text.encode())


def write_json(path: Path, model: BaseModel) -> None:
    """Write a Pydantic model as indented JSON."""
    atomic_write(path, (model.model_dump_json(indent=2) + "\n").encode())


def atomic_write(path: Path, data: bytes) -> None:
    """Replace the contents of a file atomically.

    The data is written to a temporary file in the same directory, which is
    then renamed over the destination.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        Path(tmp).replace(path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _as_float32(key: str, tensor: NDArray) -> Tensor:
    if not np.issubdtype(tensor.dtype, np.floating):
        msg = f"Tensor {key} has non-floating dtype {tensor.dtype}"
        raise CheckpointError(msg)
    result = np.ascontiguousarray(tensor, dtype=np.float32)
    if not np.isfinite(result).all():
        raise CheckpointError(f"Tensor {key} contains non-finite values")
    return result


def _infer_config(
    get: Callable[[str], Tensor],
    available: set[str],
    key_map: Mapping[str, str],
    metadata: Mapping[str, str],
) -> VitConfig:
    """Infer the architecture from tensor shapes and archive metadata."""
    conv = get("visual.conv1.weight")
    if conv.ndim != 4 or conv.shape[1] != 3 or conv.shape[2] != conv.shape[3]:
        raise ShapeMismatchError(
            "visual.conv1.weight",
            (conv.shape[0], 3, conv.shape[2], conv.shape[2]),
            conv.shape,
        )
    width, _, patch, _ = conv.shape
    positions = get("visual.positional_embedding").shape[0] - 1
    grid = math.isqrt(max(positions, 0))
    if positions < 1 or grid * grid != positions:
        msg = f"Positional embedding has {positions} patch rows, not a square"
        raise UnsupportedLayoutError(msg)
    projection = get("visual.proj")
    if projection.ndim != 2:
        raise ShapeMismatchError(
            "visual.proj", (width, projection.shape[-1]), projection.shape
        )
    layers = 0
    while key_map.get(
        _block_key(layers, "ln_1.weight"),
        _block_key(layers, "ln_1.weight"),
    ) in available:
        layers += 1
    if layers == 0:
        raise MissingKeyError(_block_key(0, "ln_1.weight"))

    extra = _parse_metadata(metadata)
    heads = int(extra.get("heads", width // 64))
    try:
        return VitConfig(
            image_size=int(extra.get("image_size", grid * patch)),
            patch_size=patch,
            width=width,
            layers=layers,
            heads=heads,
            embed_dim=projection.shape[1],
            gelu_variant=GeluVariant(
                extra.get("gelu_variant", GeluVariant.QUICK)
            ),
        )
    except ValueError as e:
        raise CheckpointError(f"Inconsistent architecture: {e}") from e


def _parse_metadata(metadata: Mapping[str, str]) -> dict[str, str]:
    if _METADATA_KEY in metadata:
        try:
            parsed = json.loads(metadata[_METADATA_KEY])
        except ValueError as e:
            raise CheckpointError(f"Invalid archive metadata: {e}") from e
        return {k: str(v) for k, v in parsed.items()}
    return dict(metadata)


def weights_from_tensors(
    config: VitConfig, tensors: Mapping[str, Tensor]
) -> VitWeights:
    blocks = tuple(
        BlockWeights(
            **{
                field: tensors[_block_key(i, suffix)]
                for field, suffix in _BLOCK_FIELDS.items()
            }
        )
        for i in range(config.layers)
    )
    top = {field: tensors[key] for field, key in _TOP_FIELDS.items()}
    return VitWeights(blocks=blocks, **top)


def tensors_from_weights(weights: VitWeights) -> dict[str, Tensor]:
    tensors = {
        key: np.ascontiguousarray(getattr(weights, field), dtype=np.float32)
        for field, key in _TOP_FIELDS.items()
    }
    for i, block in enumerate(weights.blocks):
        for field, suffix in _BLOCK_FIELDS.items():
            tensors[_block_key(i, suffix)] = np.ascontiguousarray(
                getattr(block, field), dtype=np.float32
            )
    return tensors
