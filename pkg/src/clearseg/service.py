"""Service layer for segmentation, evaluation, statistics and ablation."""

from __future__ import annotations

import itertools
import math
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import Executor
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from structlog.stdlib import BoundLogger

from .encoder import VitEncoder
from .exceptions import InputError, UndefinedMeanError
from .models import (
    AttentionMode,
    Branch,
    MIoUReport,
    RunConfig,
    SegmentationResult,
    StatsRecord,
    SurgeryConfig,
    TextEmbeddings,
)
from .schema import (
    SCHEMA_VERSION,
    EvalReport,
    Manifest,
    ManifestEntry,
)
from .segmentation import (
    compute_miou,
    plan_windows,
    preprocess_image,
    segment_image,
)
from .stats import average_records, layer_report
from .storage import (
    read_image,
    read_label_png,
    save_logits,
    write_json,
    write_label_png,
    write_table,
)

__all__ = ["SegmentationService", "ablation_grid"]


def ablation_grid(
    attn_modes: Iterable[AttentionMode],
    residual: Iterable[bool],
    ffn: Iterable[bool],
    alphas: Iterable[float],
    betas: Iterable[float],
) -> list[SurgeryConfig]:
    """Expand ablation axes into surgery configurations.

    The last axis varies fastest. Duplicated values yield duplicated
    configurations.
    """
    return [
        SurgeryConfig(
            attn_mode=mode,
            keep_residual=keep_residual,
            keep_ffn=keep_ffn,
            alpha=alpha,
            beta=beta,
        )
        for mode, keep_residual, keep_ffn, alpha, beta in itertools.product(
            attn_modes, residual, ffn, alphas, betas
        )
    ]


class SegmentationService:
    """Run the encoder over image files and write the results.

    Images are processed concurrently on the executor, and results are
    always collected in input order.

    Parameters
    ----------
    encoder
        Image encoder.
    text
        Class embeddings, or `None` for commands that do not classify.
    run
        Settings of the run.
    executor
        Executor for image-level parallelism.
    logger
        Logger to use.
    """

    def __init__(
        self,
        encoder: VitEncoder,
        text: TextEmbeddings | None,
        run: RunConfig,
        executor: Executor,
        logger: BoundLogger,
    ) -> None:
        self._encoder = encoder
        self._text = text
        self._run = run
        self._executor = executor
        self._logger = logger

    def segment(
        self, path: Path, surgery: SurgeryConfig | None = None
    ) -> SegmentationResult:
        """Segment one image file at its original resolution.

        Parameters
        ----------
        path
            Image file.
        surgery
            Surgery to use instead of the one in the run settings.

        Returns
        -------
        SegmentationResult
            Label and logit maps the size of the input image.
        """
        text = self._require_text()
        image = read_image(path)
        pixels = self._preprocess(image)
        _, height, width = pixels.shape
        plan = plan_windows(height, width, self._run.crop, self._run.stride)
        self._logger.debug(
            "Planned windows",
            image=str(path),
            size=[height, width],
            windows=len(plan.windows),
        )
        return segment_image(
            pixels,
            self._encoder,
            text,
            surgery if surgery is not None else self._run.surgery,
            self._run.crop,
            self._run.stride,
            output_size=(image.shape[0], image.shape[1]),
        )

    def run_segment(self, paths: Sequence[Path]) -> Manifest:
        """Segment image files and write label maps and a manifest.

        Parameters
        ----------
        paths
            Image files. Their stems name the outputs and must be unique.

        Returns
        -------
        Manifest
            Manifest as written to ``manifest.json``.

        Raises
        ------
        InputError
            Raised if there are no images or two share a stem.
        """
        if not paths:
            raise InputError("No images to segment")
        stems = [p.stem for p in paths]
        if len(set(stems)) != len(stems):
            raise InputError("Input images must have distinct file stems")
        text = self._require_text()
        entries = list(self._executor.map(self._segment_one, paths))
        manifest = Manifest(
            config=self._run,
            class_names=list(text.class_names),
            images=entries,
        )
        write_json(self._run.output_dir / "manifest.json", manifest)
        self._logger.info("Wrote manifest", images=len(entries))
        return manifest

    def run_eval(self, pairs: Sequence[tuple[Path, Path]]) -> EvalReport:
        """Evaluate segmentation against ground-truth label maps.

        Writes ``report.json`` with the aggregated result and
        ``per_image.csv`` with one row per pair.

        Parameters
        ----------
        pairs
            Pairs of image and ground-truth label map.

        Returns
        -------
        EvalReport
            Aggregated report.

        Raises
        ------
        InputError
            Raised if there are no pairs, or if labels are out of range or
            no class has any pixel.
        """
        if not pairs:
            raise InputError("No image pairs to evaluate")
        text = self._require_text()
        results, gts = self._predict(pairs, self._run.surgery)
        preds = [r.label_map for r in results]
        report = self._score(preds, gts)

        rows = []
        for (image, truth), pred, gt in zip(pairs, preds, gts, strict=True):
            try:
                single = self._score([pred], [gt])
                iou, miou = single.iou, single.miou
            except UndefinedMeanError:
                iou, miou = np.full(text.num_classes, np.nan), math.nan
            row: dict[str, object] = {
                "schema_version": SCHEMA_VERSION,
                "image": str(image),
                "ground_truth": str(truth),
                "miou": miou,
            }
            row.update(
                {
                    f"iou_{name}": value
                    for name, value in zip(
                        text.class_names, iou.tolist(), strict=True
                    )
                }
            )
            rows.append(row)
        per_image = pd.DataFrame(rows)
        write_table(self._run.output_dir / "per_image.csv", per_image)

        result = EvalReport.from_report(
            report, text.class_names, self._run, len(pairs)
        )
        write_json(self._run.output_dir / "report.json", result)
        self._logger.info(
            "Evaluated images", images=len(pairs), miou=result.miou
        )
        return result

    def run_stats(self, paths: Sequence[Path]) -> list[StatsRecord]:
        """Compute feature statistics averaged over images.

        Each image is resized and encoded in one pass with block traces,
        and the statistics of every branch of every block are averaged over
        the images and written to ``stats.csv``.

        Raises
        ------
        InputError
            Raised if there are no images.
        """
        if not paths:
            raise InputError("No images to analyze")
        reports = list(self._executor.map(self._stats_one, paths))
        records = average_records(reports)
        rows = []
        for record in records:
            row: dict[str, object] = {
                "schema_version": SCHEMA_VERSION,
                "layer": record.layer,
                "branch": record.branch.value,
                "entropy": record.entropy,
                "fro_norm": record.fro_norm,
                "max": record.max_value,
            }
            row.update(
                {
                    f"channel_mean_{i}": v
                    for i, v in enumerate(record.channel_means.tolist())
                }
            )
            rows.append(row)
        write_table(self._run.output_dir / "stats.csv", pd.DataFrame(rows))
        self._logger.info("Wrote statistics", images=len(paths))
        return records

    def run_ablate(
        self,
        pairs: Sequence[tuple[Path, Path]],
        grid: Sequence[SurgeryConfig],
    ) -> pd.DataFrame:
        """Evaluate every surgery configuration of an ablation grid.

        The results table is rewritten to ``ablation.csv`` after each
        configuration, so completed rows survive a later failure.

        Parameters
        ----------
        pairs
            Pairs of image and ground-truth label map.
        grid
            Configurations to evaluate, in output order.

        Returns
        -------
        pandas.DataFrame
            One row per configuration.

        Raises
        ------
        InputError
            Raised if the grid or the pair list is empty.
        """
        if not grid:
            raise InputError("Ablation grid is empty")
        if not pairs:
            raise InputError("No image pairs to evaluate")
        path = self._run.output_dir / "ablation.csv"
        rows = []
        table = pd.DataFrame()
        for surgery in grid:
            start = time.perf_counter()
            results, gts = self._predict(pairs, surgery)
            report = self._score([r.label_map for r in results], gts)
            rows.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "attn": surgery.attn_mode.value,
                    "residual": surgery.keep_residual,
                    "ffn": surgery.keep_ffn,
                    "alpha": surgery.alpha,
                    "beta": surgery.beta,
                    "readout": surgery.readout.value,
                    "miou": report.miou,
                    "attn_norm": math.fsum(r.attn_norm for r in results)
                    / len(results),
                    "res_norm": math.fsum(r.res_norm for r in results)
                    / len(results),
                }
            )
            table = pd.DataFrame(rows)
            write_table(path, table)
            self._logger.info(
                "Evaluated configuration",
                config=surgery.model_dump(mode="json"),
                miou=report.miou,
                seconds=round(time.perf_counter() - start, 3),
            )
        return table

    def _predict(
        self, pairs: Sequence[tuple[Path, Path]], surgery: SurgeryConfig
    ) -> tuple[list[SegmentationResult], list[NDArray[np.int64]]]:
        def run(pair: tuple[Path, Path]) -> SegmentationResult:
            return self._timed_segment(pair[0], surgery)

        results = list(self._executor.map(run, pairs))
        gts = [read_label_png(truth) for _, truth in pairs]
        return results, gts

    def _score(
        self, preds: list[NDArray[np.int64]], gts: list[NDArray[np.int64]]
    ) -> MIoUReport:
        text = self._require_text()
        return compute_miou(
            preds, gts, text.num_classes, self._run.ignore_index
        )

    def _preprocess(self, image: NDArray[np.uint8]) -> NDArray[np.float32]:
        return preprocess_image(
            image,
            self._run.shorter_side,
            self._run.image_mean,
            self._run.image_std,
            self._encoder.config.patch_size,
        )

    def _require_text(self) -> TextEmbeddings:
        if self._text is None:
            raise InputError("Text embeddings are required (--text-emb)")
        return self._text

    def _segment_one(self, path: Path) -> ManifestEntry:
        start = time.perf_counter()
        result = self._timed_segment(path, self._run.surgery)
        output = self._run.output_dir / f"{path.stem}.png"
        write_label_png(output, result.label_map)
        logits = None
        if self._run.save_logits:
            logits = self._run.output_dir / f"{path.stem}.logits.safetensors"
            save_logits(logits, result.logit_map)
        height, width = result.label_map.shape
        return ManifestEntry(
            input=path,
            output=output,
            logits=logits,
            height=height,
            width=width,
            seconds=round(time.perf_counter() - start, 3),
        )

    def _timed_segment(
        self, path: Path, surgery: SurgeryConfig
    ) -> SegmentationResult:
        logger = self._logger.bind(image=str(path))
        start = time.perf_counter()
        result = self.segment(path, surgery)
        elapsed = time.perf_counter() - start
        logger.info("Segmented image", seconds=round(elapsed, 3))
        return result

    def _stats_one(self, path: Path) -> list[StatsRecord]:
        logger = self._logger.bind(image=str(path))
        start = time.perf_counter()
        pixels = self._preprocess(read_image(path))
        _, traces = self._encoder.encode_dense(
            pixels, self._run.surgery, trace=True
        )
        records = layer_report(
            traces or [], include_class_token=self._run.include_class_token
        )
        elapsed = time.perf_counter() - start
        logger.info(
            "Traced image",
            size=list(pixels.shape[1:]),
            blocks=len(records) // len(Branch),
            seconds=round(elapsed, 3),
        )
        return records
