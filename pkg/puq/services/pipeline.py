import asyncio
import logging
from typing import Callable, Optional

import numpy as np

from puq.core.config import settings

logger = logging.getLogger(__name__)

ChunkFn = Callable[[np.ndarray], np.ndarray]


def _make_semaphore(limit: Optional[int]) -> asyncio.Semaphore:
    value = limit or 1
    if value < 1:
        value = 1
    return asyncio.Semaphore(value)


async def map_chunks_async(
    fn: ChunkFn,
    inputs: np.ndarray,
    chunk_size: Optional[int] = None,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Apply ``fn`` to row chunks of ``inputs`` on worker threads.

    Chunk results are concatenated in input order, so the output never
    depends on scheduling.
    """
    n_samples = int(inputs.shape[0])
    size = max(1, chunk_size or settings.PUQ_SCORE_CHUNK_SIZE)
    semaphore = _make_semaphore(threads or settings.evaluation_threads)

    async def _run_chunk(start: int) -> np.ndarray:
        async with semaphore:
            return await asyncio.to_thread(fn, inputs[start : start + size])

    tasks = [_run_chunk(start) for start in range(0, n_samples, size)]
    logger.debug("Mapping %s samples over %s chunks", n_samples, len(tasks))
    results = await asyncio.gather(*tasks)
    return np.concatenate(results, axis=0)


def map_chunks(
    fn: ChunkFn,
    inputs: np.ndarray,
    chunk_size: Optional[int] = None,
    threads: Optional[int] = None,
) -> np.ndarray:
    if inputs.shape[0] == 0:
        raise ValueError("map_chunks needs at least one row")
    return asyncio.run(map_chunks_async(fn, inputs, chunk_size=chunk_size, threads=threads))
