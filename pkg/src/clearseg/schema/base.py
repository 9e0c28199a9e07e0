"""Common base for versioned output files."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from .. import __version__

__all__ = ["SCHEMA_VERSION", "SchemaBase"]

SCHEMA_VERSION = 1
"""Version of every JSON and CSV output format.

Increment when a field is removed or changes meaning.
"""


class SchemaBase(BaseModel):
    """Base class for JSON output files."""

    schema_version: Literal[1] = Field(
        SCHEMA_VERSION, title="Version of the file format"
    )

    version: str = Field(
        __version__, title="Version of clearseg that wrote the file"
    )
