"""Manifest written by the ``segment`` command."""

from __future__ import annotations

from pathlib import Path

from pydantic import BaseModel, Field

from ..models import RunConfig
from .base import SchemaBase

__all__ = ["Manifest", "ManifestEntry"]


class ManifestEntry(BaseModel):
    """Outputs for one segmented image."""

    input: Path = Field(..., title="Input image")

    output: Path = Field(..., title="Label map PNG")

    logits: Path | None = Field(
        None, title="Logit archive, if logits were saved"
    )

    height: int = Field(..., title="Label map height in pixels")

    width: int = Field(..., title="Label map width in pixels")

    seconds: float = Field(..., title="Wall-clock inference time")


class Manifest(SchemaBase):
    """Record of a segmentation run."""

    config: RunConfig = Field(..., title="Settings used for the run")

    class_names: list[str] = Field(..., title="Class names in label order")

    images: list[ManifestEntry] = Field(
        ..., title="Outputs per image, in input order"
    )
