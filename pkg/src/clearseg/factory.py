"""Component factory for clearseg."""

from __future__ import annotations

from collections.abc import Iterator
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from typing import Self

from structlog.stdlib import BoundLogger

from .encoder import VitEncoder
from .exceptions import ConsistencyError, InputError
from .models import RunConfig, TextEmbeddings
from .service import SegmentationService
from .storage import load_checkpoint, load_key_map, load_text_embeddings

__all__ = ["Factory"]


class Factory:
    """Component factory for command-line runs.

    Parameters
    ----------
    run
        Settings of the run.
    executor
        Executor shared by all created components.
    logger
        Logger to use.
    """

    @classmethod
    @contextmanager
    def standalone(cls, run: RunConfig, logger: BoundLogger) -> Iterator[Self]:
        """Context manager for clearseg components.

        Parameters
        ----------
        run
            Settings of the run. ``jobs`` sets the size of the thread pool.
        logger
            Logger to use.

        Yields
        ------
        Factory
            The factory. Must be used as a context manager.
        """
        executor = ThreadPoolExecutor(
            max_workers=run.jobs, thread_name_prefix="clearseg"
        )
        try:
            yield cls(run, executor, logger)
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

    def __init__(
        self, run: RunConfig, executor: Executor, logger: BoundLogger
    ) -> None:
        self._run = run
        self._executor = executor
        self._logger = logger
        self._encoder: VitEncoder | None = None

    def create_encoder(self) -> VitEncoder:
        """Load the image encoder from the configured checkpoint.

        The checkpoint is read once per factory.

        Returns
        -------
        VitEncoder
            Encoder using the configured layer-norm epsilon and
            accumulation strategy.
        """
        if self._encoder is None:
            key_map = None
            if self._run.key_map:
                key_map = load_key_map(self._run.key_map)
            config, weights = load_checkpoint(
                self._run.checkpoint,
                key_map,
                gelu_variant=self._run.gelu_variant,
            )
            self._logger.info(
                "Loaded checkpoint",
                path=str(self._run.checkpoint),
                layers=config.layers,
                width=config.width,
                heads=config.heads,
                patch_size=config.patch_size,
            )
            self._encoder = VitEncoder(
                config=config,
                weights=weights,
                eps=self._run.layer_norm_eps,
                accumulate=self._run.accumulate,
            )
        return self._encoder

    def create_text_embeddings(self) -> TextEmbeddings:
        """Load the configured class text embeddings.

        Raises
        ------
        InputError
            Raised if no embedding archive was configured.
        ConsistencyError
            Raised if the embedding dimension differs from the encoder's.
        """
        if not self._run.text_embeddings:
            raise InputError("Text embeddings are required (--text-emb)")
        text = load_text_embeddings(self._run.text_embeddings)
        embed_dim = self.create_encoder().config.embed_dim
        if text.matrix.shape[1] != embed_dim:
            msg = (
                f"Text embeddings have dimension {text.matrix.shape[1]},"
                f" encoder projects to {embed_dim}"
            )
            raise ConsistencyError(msg)
        return text

    def create_segmentation_service(
        self, *, with_text: bool = True
    ) -> SegmentationService:
        """Create a segmentation service.

        Parameters
        ----------
        with_text
            Whether to load text embeddings. Statistics runs do not need
            them.

        Returns
        -------
        SegmentationService
            Newly-created segmentation service.
        """
        text = self.create_text_embeddings() if with_text else None
        return SegmentationService(
            self.create_encoder(),
            text,
            self._run,
            self._executor,
            self._logger,
        )
