"""Command-line interface for clearseg."""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import click
import structlog
from pydantic import ValidationError
from safir.click import display_help
from structlog.stdlib import BoundLogger

from .config import config
from .exceptions import ClearsegError, InputError
from .factory import Factory
from .fixtures import DEFAULT_SCALE, gen_fixture_bundle
from .kernel import Accumulation, GeluVariant
from .models import (
    PRESETS,
    AttentionMode,
    Readout,
    RunConfig,
    SurgeryConfig,
    VitConfig,
)
from .service import ablation_grid

__all__ = [
    "StageError",
    "ablate",
    "eval_",
    "gen_fixture",
    "help",
    "main",
    "segment",
    "stats",
]

_ATTN_CHOICES = {
    "qk": AttentionMode.QK,
    "qq": AttentionMode.QQ,
    "kk": AttentionMode.KK,
    "vv": AttentionMode.VV,
    "identity": AttentionMode.IDENTITY,
    "qqkk": AttentionMode.QQ_PLUS_KK,
    "qq_plus_kk": AttentionMode.QQ_PLUS_KK,
}

_TOGGLE_CHOICES = {"on": (True,), "off": (False,), "both": (True, False)}

_ExistingFile = click.Path(exists=True, dir_okay=False, path_type=Path)


class StageError(click.ClickException):
    """A named stage of a command failed.

    The process exit code is taken from the underlying error.

    Parameters
    ----------
    stage
        Name of the failed stage.
    error
        Underlying error.
    """

    def __init__(self, stage: str, error: ClearsegError) -> None:
        super().__init__(f"{stage} failed: {error}")
        self.exit_code = error.exit_code
        self.stage = stage


@contextmanager
def _stage(name: str, logger: BoundLogger) -> Iterator[BoundLogger]:
    stage_logger = logger.bind(stage=name)
    try:
        yield stage_logger
    except ValidationError as e:
        stage_logger.error("Invalid settings", message=str(e))
        raise StageError(name, InputError(str(e))) from e
    except ClearsegError as e:
        stage_logger.error("Stage failed", error=e.error, message=str(e))
        raise StageError(name, e) from e


def _run_options[F: Callable[..., Any]](func: F) -> F:
    """Add the options shared by every command that runs the encoder."""
    options = [
        click.option(
            "--checkpoint",
            required=True,
            type=_ExistingFile,
            help="CLIP checkpoint in safetensors format.",
        ),
        click.option(
            "--text-emb",
            type=_ExistingFile,
            help="Class text embeddings with a .labels.json sidecar.",
        ),
        click.option(
            "--key-map",
            type=_ExistingFile,
            help="JSON table mapping expected tensor names to archive names.",
        ),
        click.option(
            "--gelu",
            type=click.Choice([v.value for v in GeluVariant]),
            help="Override the checkpoint's feed-forward activation.",
        ),
        click.option(
            "--shorter-side",
            type=click.IntRange(min=1),
            default=config.shorter_side,
            show_default=True,
            help="Resize images so the shorter side has this length.",
        ),
        click.option(
            "--crop",
            type=click.IntRange(min=1),
            default=config.crop,
            show_default=True,
            help="Sliding window size in pixels.",
        ),
        click.option(
            "--stride",
            type=click.IntRange(min=1),
            default=config.stride,
            show_default=True,
            help="Sliding window stride in pixels.",
        ),
        click.option(
            "--out",
            type=click.Path(file_okay=False, path_type=Path),
            default=Path("clearseg-out"),
            show_default=True,
            help="Output directory.",
        ),
        click.option(
            "--jobs",
            type=click.IntRange(min=1),
            default=1,
            show_default=True,
            help="Number of images to process concurrently.",
        ),
        click.option(
            "--fast",
            is_flag=True,
            help="Use BLAS matrix products (faster, not bit-reproducible).",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _surgery_options[F: Callable[..., Any]](
    default: str,
) -> Callable[[F], F]:
    """Add the surgery preset and the flags that override it."""

    def decorator(func: F) -> F:
        options = [
            click.option(
                "--surgery",
                type=click.Choice(sorted(PRESETS)),
                default=default,
                show_default=True,
                help="Surgery preset for the last block.",
            ),
            click.option(
                "--attn",
                type=click.Choice(list(_ATTN_CHOICES)),
                help="Attention of the last block.",
            ),
            click.option(
                "--residual/--no-residual",
                default=None,
                help="Keep or drop the last residual connection.",
            ),
            click.option(
                "--ffn/--no-ffn",
                default=None,
                help="Keep or drop the last feed-forward network.",
            ),
            click.option(
                "--alpha",
                type=float,
                help="Scale of the last attention branch.",
            ),
            click.option(
                "--beta",
                type=float,
                help="Fraction of top-mean residual channels to zero.",
            ),
            click.option(
                "--readout",
                type=click.Choice([v.value for v in Readout]),
                help="Last-block token matrix to project.",
            ),
        ]
        for option in reversed(options):
            func = option(func)
        return func

    return decorator


def _make_surgery(options: dict[str, Any]) -> SurgeryConfig:
    preset = PRESETS[options["surgery"]]
    overrides = {
        "attn_mode": (
            _ATTN_CHOICES[options["attn"]] if options["attn"] else None
        ),
        "keep_residual": options["residual"],
        "keep_ffn": options["ffn"],
        "alpha": options["alpha"],
        "beta": options["beta"],
        "readout": options["readout"],
    }
    settings = preset.model_dump()
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return SurgeryConfig.model_validate(settings)


def _make_run(options: dict[str, Any], **extra: Any) -> RunConfig:
    if "surgery" in options:
        extra["surgery"] = _make_surgery(options)
    accumulate = Accumulation.BLAS if options["fast"] else config.accumulate
    return RunConfig(
        checkpoint=options["checkpoint"],
        text_embeddings=options["text_emb"],
        key_map=options["key_map"],
        gelu_variant=options["gelu"],
        shorter_side=options["shorter_side"],
        crop=options["crop"],
        stride=options["stride"],
        image_mean=config.image_mean,
        image_std=config.image_std,
        layer_norm_eps=config.layer_norm_eps,
        accumulate=accumulate,
        ignore_index=config.ignore_index,
        output_dir=options["out"],
        jobs=options["jobs"],
        **extra,
    )


def _parse_pairs(
    pairs: Sequence[str], pairs_file: Path | None
) -> list[tuple[Path, Path]]:
    """Collect image and ground-truth pairs from arguments and a file."""
    result = []
    for pair in pairs:
        image, sep, truth = pair.rpartition(":")
        if not sep or not image or not truth:
            raise InputError(f"Expected IMAGE:GT, got {pair!r}")
        result.append((Path(image).resolve(), Path(truth).resolve()))
    if pairs_file:
        base = pairs_file.parent
        try:
            lines = pairs_file.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise InputError(f"Cannot read {pairs_file}: {e}") from e
        for number, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 2:
                msg = f"{pairs_file}:{number}: expected 2 paths, got {fields}"
                raise InputError(msg)
            image_path, truth_path = (base / f for f in fields)
            result.append((image_path.resolve(), truth_path.resolve()))
    if not result:
        raise InputError("No image pairs given")
    return result


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(message="%(version)s")
def main() -> None:
    """Training-free open-vocabulary segmentation with CLIP surgery."""


@main.command()
@click.argument("topic", default=None, required=False, nargs=1)
@click.pass_context
def help(ctx: click.Context, topic: str | None) -> None:
    """Show help for any command."""
    display_help(main, ctx, topic)


@main.command()
@_run_options
@_surgery_options("clearclip")
@click.option(
    "--save-logits",
    is_flag=True,
    help="Also write logit maps as safetensors archives.",
)
@click.argument(
    "images", nargs=-1, type=click.Path(dir_okay=False, path_type=Path)
)
def segment(
    *, images: tuple[Path, ...], save_logits: bool, **options: Any
) -> None:
    """Segment images into label-map PNGs.

    Writes one PNG per image, named after the image, and a manifest.json
    recording the settings and per-image timing.
    """
    logger = structlog.get_logger("clearseg").bind(command="segment")
    with _stage("configure", logger):
        run = _make_run(options, save_logits=save_logits)
    with Factory.standalone(run, logger) as factory:
        with _stage("load", logger):
            service = factory.create_segmentation_service()
        with _stage("segment", logger):
            service.run_segment([p.resolve() for p in images])


@main.command("eval")
@_run_options
@_surgery_options("clearclip")
@click.option(
    "--pairs",
    "pairs_file",
    type=_ExistingFile,
    help="File with an image and a ground-truth path per line.",
)
@click.argument("pairs", nargs=-1)
def eval_(
    *, pairs: tuple[str, ...], pairs_file: Path | None, **options: Any
) -> None:
    """Evaluate mIoU against ground-truth label maps.

    Pairs are given as IMAGE:GT arguments or with --pairs. Writes
    report.json and per_image.csv.
    """
    logger = structlog.get_logger("clearseg").bind(command="eval")
    with _stage("configure", logger):
        run = _make_run(options)
        image_pairs = _parse_pairs(pairs, pairs_file)
    with Factory.standalone(run, logger) as factory:
        with _stage("load", logger):
            service = factory.create_segmentation_service()
        with _stage("evaluate", logger):
            report = service.run_eval(image_pairs)
    click.echo(f"mIoU: {report.miou:.4f}")


@main.command()
@_run_options
@_surgery_options("vanilla")
@click.option(
    "--class-token",
    is_flag=True,
    help="Include the class token in the statistics.",
)
@click.argument(
    "images", nargs=-1, type=click.Path(dir_okay=False, path_type=Path)
)
def stats(
    *, images: tuple[Path, ...], class_token: bool, **options: Any
) -> None:
    """Write per-layer feature statistics averaged over images.

    Writes stats.csv with one row per layer and branch.
    """
    logger = structlog.get_logger("clearseg").bind(command="stats")
    with _stage("configure", logger):
        run = _make_run(options, include_class_token=class_token)
    with Factory.standalone(run, logger) as factory:
        with _stage("load", logger):
            service = factory.create_segmentation_service(with_text=False)
        with _stage("stats", logger):
            service.run_stats([p.resolve() for p in images])


@main.command()
@_run_options
@click.option(
    "--attn",
    "attn_modes",
    type=click.Choice(list(_ATTN_CHOICES)),
    multiple=True,
    default=("qk", "qq", "kk", "vv"),
    show_default=True,
    help="Attention modes to sweep. May be repeated.",
)
@click.option(
    "--residual",
    type=click.Choice(list(_TOGGLE_CHOICES)),
    default="both",
    show_default=True,
    help="Residual connection settings to sweep.",
)
@click.option(
    "--ffn",
    type=click.Choice(list(_TOGGLE_CHOICES)),
    default="both",
    show_default=True,
    help="Feed-forward network settings to sweep.",
)
@click.option(
    "--alpha",
    "alphas",
    type=float,
    multiple=True,
    default=(1.0,),
    show_default=True,
    help="Attention scales to sweep. May be repeated.",
)
@click.option(
    "--beta",
    "betas",
    type=float,
    multiple=True,
    default=(0.0,),
    show_default=True,
    help="Residual channel-masking fractions to sweep. May be repeated.",
)
@click.option(
    "--pairs",
    "pairs_file",
    type=_ExistingFile,
    help="File with an image and a ground-truth path per line.",
)
@click.argument("pairs", nargs=-1)
def ablate(
    *,
    attn_modes: tuple[str, ...],
    residual: str,
    ffn: str,
    alphas: tuple[float, ...],
    betas: tuple[float, ...],
    pairs: tuple[str, ...],
    pairs_file: Path | None,
    **options: Any,
) -> None:
    """Evaluate mIoU over a grid of last-block surgeries.

    The grid is the product of all swept settings. Writes ablation.csv with
    one row per configuration, rewritten as each configuration finishes.
    """
    logger = structlog.get_logger("clearseg").bind(command="ablate")
    with _stage("configure", logger):
        run = _make_run(options)
        image_pairs = _parse_pairs(pairs, pairs_file)
        grid = ablation_grid(
            [_ATTN_CHOICES[m] for m in attn_modes],
            _TOGGLE_CHOICES[residual],
            _TOGGLE_CHOICES[ffn],
            alphas,
            betas,
        )
    with Factory.standalone(run, logger) as factory:
        with _stage("load", logger):
            service = factory.create_segmentation_service()
        with _stage("ablate", logger):
            service.run_ablate(image_pairs, grid)


@main.command()
@click.option(
    "--seed", type=int, default=7, show_default=True, help="Base seed."
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("fixture"),
    show_default=True,
    help="Output directory.",
)
@click.option(
    "--classes",
    default="background,object",
    show_default=True,
    help="Comma-separated class names for the text embeddings.",
)
@click.option("--image-size", type=int, default=32, show_default=True)
@click.option("--patch-size", type=int, default=8, show_default=True)
@click.option("--width", type=int, default=32, show_default=True)
@click.option("--layers", type=int, default=3, show_default=True)
@click.option("--heads", type=int, default=2, show_default=True)
@click.option("--embed-dim", type=int, default=16, show_default=True)
@click.option(
    "--gelu",
    type=click.Choice([v.value for v in GeluVariant]),
    default=GeluVariant.QUICK.value,
    show_default=True,
)
@click.option(
    "--image-height",
    type=click.IntRange(min=1),
    default=48,
    show_default=True,
    help="Height of the test image.",
)
@click.option(
    "--image-width",
    type=click.IntRange(min=1),
    default=64,
    show_default=True,
    help="Width of the test image.",
)
@click.option(
    "--scale",
    type=float,
    default=DEFAULT_SCALE,
    show_default=True,
    help="Magnitude of the sampled weights.",
)
def gen_fixture(
    *,
    seed: int,
    out: Path,
    classes: str,
    image_size: int,
    patch_size: int,
    width: int,
    layers: int,
    heads: int,
    embed_dim: int,
    gelu: str,
    image_height: int,
    image_width: int,
    scale: float,
) -> None:
    """Generate a deterministic synthetic checkpoint and test inputs.

    Writes checkpoint.safetensors, text.safetensors with its class sidecar,
    and image.png. The same options always produce identical files.
    """
    logger = structlog.get_logger("clearseg").bind(command="gen-fixture")
    with _stage("gen-fixture", logger) as stage_logger:
        vit = VitConfig(
            image_size=image_size,
            patch_size=patch_size,
            width=width,
            layers=layers,
            heads=heads,
            embed_dim=embed_dim,
            gelu_variant=GeluVariant(gelu),
        )
        names = [c.strip() for c in classes.split(",") if c.strip()]
        if not names:
            raise InputError("At least one class name is required")
        bundle = gen_fixture_bundle(
            seed,
            vit,
            names,
            out.resolve(),
            (image_height, image_width),
            scale=scale,
        )
        stage_logger.info("Wrote fixture", seed=seed, path=str(out))
    click.echo(str(bundle.checkpoint))
    click.echo(str(bundle.text_embeddings))
    click.echo(str(bundle.image))
