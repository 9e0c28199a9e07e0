"""Evaluation report written by the ``eval`` command."""

from __future__ import annotations

import math
from typing import Self

from pydantic import BaseModel, Field

from ..models import MIoUReport, RunConfig
from .base import SchemaBase

__all__ = ["ClassIoU", "EvalReport"]


class ClassIoU(BaseModel):
    """Intersection over union of one class."""

    name: str = Field(..., title="Class name")

    iou: float | None = Field(
        ...,
        title="Intersection over union",
        description="Null if the class is in neither prediction nor truth",
    )


class EvalReport(SchemaBase):
    """Aggregated evaluation over all image pairs."""

    config: RunConfig = Field(..., title="Settings used for the run")

    images: int = Field(..., title="Number of evaluated image pairs")

    miou: float = Field(..., title="Mean intersection over union")

    classes: list[ClassIoU] = Field(..., title="Per-class results")

    confusion: list[list[int]] = Field(
        ..., title="Confusion matrix indexed [truth][prediction]"
    )

    ignored: int = Field(..., title="Pixels skipped as ignore index")

    @classmethod
    def from_report(
        cls,
        report: MIoUReport,
        class_names: tuple[str, ...],
        config: RunConfig,
        images: int,
    ) -> Self:
        """Convert an `~clearseg.models.MIoUReport` for serialization."""
        classes = [
            ClassIoU(name=name, iou=None if math.isnan(iou) else iou)
            for name, iou in zip(class_names, report.iou.tolist(), strict=True)
        ]
        return cls(
            config=config,
            images=images,
            miou=report.miou,
            classes=classes,
            confusion=report.confusion.tolist(),
            ignored=report.ignored,
        )
