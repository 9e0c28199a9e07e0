"""Schemas of files written by clearseg."""

from __future__ import annotations

from .base import SCHEMA_VERSION, SchemaBase
from .manifest import Manifest, ManifestEntry
from .report import ClassIoU, EvalReport

__all__ = [
    "SCHEMA_VERSION",
    "ClassIoU",
    "EvalReport",
    "Manifest",
    "ManifestEntry",
    "SchemaBase",
]
