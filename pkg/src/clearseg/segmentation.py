"""Dense open-vocabulary segmentation and its evaluation."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from concurrent.futures import Executor

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .encoder import VitEncoder
from .exceptions import (
    DimensionError,
    InputError,
    LabelRangeError,
    NumericError,
    UndefinedMeanError,
)
from .kernel import Accumulation, Tensor, cosine_matrix, interpolate_grid
from .models import (
    MIoUReport,
    PatchEmbeddings,
    SegmentationResult,
    SurgeryConfig,
    TextEmbeddings,
    Window,
    WindowPlan,
)
from .stats import frobenius_norm

__all__ = [
    "classify_patches",
    "compute_miou",
    "plan_windows",
    "preprocess_image",
    "segment_image",
    "target_size",
]


def target_size(
    height: int, width: int, shorter_side: int, patch_size: int
) -> tuple[int, int]:
    """Compute the resized image size used for inference.

    The shorter side is scaled to ``shorter_side`` with the aspect ratio
    preserved, then both sides are rounded down to multiples of the patch
    size.
    """
    scale = shorter_side / min(height, width)
    new_h = round(height * scale)
    new_w = round(width * scale)
    new_h = max(patch_size, new_h - new_h % patch_size)
    new_w = max(patch_size, new_w - new_w % patch_size)
    return new_h, new_w


def preprocess_image(
    image: NDArray[np.uint8],
    shorter_side: int,
    mean: Sequence[float],
    std: Sequence[float],
    patch_size: int,
) -> Tensor:
    """Resize and normalize an RGB image for the encoder.

    Parameters
    ----------
    image
        RGB bytes, ``H × W × 3``.
    shorter_side
        Target length of the shorter side in pixels.
    mean
        Per-channel mean, applied after scaling to ``[0, 1]``.
    std
        Per-channel standard deviation.
    patch_size
        Both output sides are multiples of this size.

    Returns
    -------
    Tensor
        Normalized image, ``3 × H' × W'``.

    Raises
    ------
    InputError
        Raised if the image is empty or not three-channel.
    """
    if image.ndim != 3 or image.shape[2] != 3 or 0 in image.shape:
        raise InputError(f"Expected an H × W × 3 image, got {image.shape}")
    height, width, _ = image.shape
    new_h, new_w = target_size(height, width, shorter_side, patch_size)
    if (new_h, new_w) != (height, width):
        resized = Image.fromarray(image).resize(
            (new_w, new_h), Image.Resampling.BILINEAR
        )
        image = np.asarray(resized, dtype=np.uint8)
    pixels = image.astype(np.float32) / np.float32(255.0)
    pixels = (pixels - np.asarray(mean, dtype=np.float32)) / np.asarray(
        std, dtype=np.float32
    )
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def _window_offsets(size: int, crop: int, stride: int) -> list[int]:
    if size <= crop:
        return [0]
    span = size - crop
    # At least two windows: the first at zero, the last clamped to the edge.
    count = max(2, span // stride + 1)
    if (count - 2) * stride + crop < span:
        count += 1
    offsets = [k * stride for k in range(count)]
    offsets[-1] = span
    return offsets


def plan_windows(
    height: int, width: int, crop: int, stride: int
) -> WindowPlan:
    """Tile an image with sliding windows.

    Windows are ``crop × crop`` at the given stride with the last row and
    column clamped to the image edge. A dimension smaller than the crop gets
    a single window spanning it. The stride is capped at the crop so that
    the windows always cover the image.

    Parameters
    ----------
    height, width
        Image size in pixels.
    crop
        Window size in pixels.
    stride
        Step between window origins.

    Returns
    -------
    WindowPlan
        Windows in row-major order.
    """
    stride = min(stride, crop)
    tops = _window_offsets(height, crop, stride)
    lefts = _window_offsets(width, crop, stride)
    windows = tuple(
        Window(
            top=top,
            left=left,
            height=min(crop, height),
            width=min(crop, width),
        )
        for top in tops
        for left in lefts
    )
    return WindowPlan(windows=windows, crop_size=crop, stride=stride)


def classify_patches(
    patches: PatchEmbeddings,
    text: TextEmbeddings,
    *,
    accumulate: Accumulation = Accumulation.ORDERED,
) -> Tensor:
    """Score every patch against every class by cosine similarity.

    Returns
    -------
    Tensor
        Raw cosine logits, ``C × grid_h × grid_w``.

    Raises
    ------
    DimensionError
        Raised if the embedding dimensions differ.
    """
    sims = cosine_matrix(patches.matrix, text.matrix, accumulate=accumulate)
    return np.ascontiguousarray(
        sims.T.reshape(text.num_classes, patches.grid_h, patches.grid_w)
    )


def segment_image(
    pixels: Tensor,
    encoder: VitEncoder,
    text: TextEmbeddings,
    surgery: SurgeryConfig | None,
    crop: int,
    stride: int,
    *,
    output_size: tuple[int, int] | None = None,
    executor: Executor | None = None,
) -> SegmentationResult:
    """Segment one preprocessed image with sliding-window inference.

    Each window is encoded, classified, and its logits bilinearly upsampled
    to the window size. Overlapping logits are averaged by per-pixel
    coverage, and each pixel takes the class with the highest logit, the
    lowest index winning ties.

    Parameters
    ----------
    pixels
        Normalized image, ``3 × H × W``.
    encoder
        Image encoder.
    text
        Class embeddings.
    surgery
        Last-block surgery, or `None` for plain CLIP.
    crop
        Window size in pixels.
    stride
        Window stride in pixels.
    output_size
        If given, ``(height, width)`` to which the averaged logits are
        resized before the argmax, usually the original image size.
    executor
        If given, windows are encoded concurrently on this executor. The
        result does not depend on it.

    Returns
    -------
    SegmentationResult
        Label and logit maps, with the last block's attention and residual
        norms averaged over the windows.

    Raises
    ------
    NumericError
        Raised if a pixel is not covered by any window or an intermediate
        value is non-finite.
    """
    _, height, width = pixels.shape
    plan = plan_windows(height, width, crop, stride)

    def run(window: Window) -> tuple[Tensor, float, float]:
        crop_pixels = pixels[
            :,
            window.top : window.top + window.height,
            window.left : window.left + window.width,
        ]
        patches, traces = encoder.encode_dense(
            crop_pixels, surgery, trace=True
        )
        last = (traces or [])[-1]
        logits = classify_patches(
            patches, text, accumulate=encoder.accumulate
        )
        upsampled = interpolate_grid(
            logits.transpose(1, 2, 0), window.height, window.width
        )
        return (
            upsampled.transpose(2, 0, 1),
            frobenius_norm(last.x_attn[1:]),
            frobenius_norm(last.x_res[1:]),
        )

    if executor is None:
        outputs: Iterable[tuple[Tensor, float, float]] = map(
            run, plan.windows
        )
    else:
        outputs = executor.map(run, plan.windows)

    total = np.zeros((text.num_classes, height, width), dtype=np.float32)
    coverage = np.zeros((height, width), dtype=np.float32)
    attn_norms = []
    res_norms = []
    for window, (logits, attn_norm, res_norm) in zip(
        plan.windows, outputs, strict=True
    ):
        attn_norms.append(attn_norm)
        res_norms.append(res_norm)
        rows = slice(window.top, window.top + window.height)
        cols = slice(window.left, window.left + window.width)
        total[:, rows, cols] += logits
        coverage[rows, cols] += 1.0
    if not coverage.all():
        raise NumericError("Sliding windows leave pixels uncovered", "windows")
    logit_map = total / coverage
    if output_size is not None and output_size != (height, width):
        logit_map = interpolate_grid(
            logit_map.transpose(1, 2, 0), *output_size
        ).transpose(2, 0, 1)
        logit_map = np.ascontiguousarray(logit_map)
    return SegmentationResult(
        label_map=np.argmax(logit_map, axis=0).astype(np.int64),
        logit_map=logit_map,
        class_names=text.class_names,
        attn_norm=math.fsum(attn_norms) / len(attn_norms),
        res_norm=math.fsum(res_norms) / len(res_norms),
    )


def _check_labels(
    labels: NDArray[np.integer], num_classes: int, ignore_index: int
) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise LabelRangeError(int(labels[bad][0]), num_classes)


def compute_miou(
    preds: Sequence[NDArray[np.integer]],
    gts: Sequence[NDArray[np.integer]],
    num_classes: int,
    ignore_index: int = 255,
) -> MIoUReport:
    """Compute per-class and mean intersection over union.

    Pixels whose ground truth is the ignore index are skipped. A prediction
    of the ignore index on a valid pixel counts as a miss for the true
    class. Classes absent from both prediction and ground truth get NaN and
    are left out of the mean.

    Parameters
    ----------
    preds
        Predicted label maps.
    gts
        Ground-truth label maps, paired with ``preds``.
    num_classes
        Number of classes.
    ignore_index
        Label value excluded from evaluation.

    Returns
    -------
    MIoUReport
        Accumulated report.

    Raises
    ------
    DimensionError
        Raised if a pair differs in shape or the counts differ.
    LabelRangeError
        Raised if a label is neither a valid class nor the ignore index.
    UndefinedMeanError
        Raised if no class has any pixel.
    """
    if len(preds) != len(gts):
        msg = f"{len(preds)} predictions but {len(gts)} ground truths"
        raise DimensionError(msg)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    missed = np.zeros(num_classes, dtype=np.int64)
    ignored = 0
    for pred, gt in zip(preds, gts, strict=True):
        if pred.shape != gt.shape:
            msg = f"Prediction {pred.shape} and truth {gt.shape} differ"
            raise DimensionError(msg)
        _check_labels(gt, num_classes, ignore_index)
        _check_labels(pred, num_classes, ignore_index)
        valid = gt != ignore_index
        ignored += int((~valid).sum())
        truth = gt[valid].astype(np.int64)
        guess = pred[valid].astype(np.int64)
        predicted = guess != ignore_index
        confusion += np.bincount(
            truth[predicted] * num_classes + guess[predicted],
            minlength=num_classes * num_classes,
        ).reshape(num_classes, num_classes)
        missed += np.bincount(truth[~predicted], minlength=num_classes)

    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp + missed
    union = tp + fp + fn
    iou = np.full(num_classes, np.nan, dtype=np.float64)
    present = union > 0
    iou[present] = tp[present] / union[present]
    if not present.any():
        raise UndefinedMeanError("No valid pixels to evaluate")
    values = iou[present].tolist()
    return MIoUReport(
        iou=iou,
        miou=math.fsum(values) / len(values),
        confusion=confusion,
        ignored=ignored,
    )
