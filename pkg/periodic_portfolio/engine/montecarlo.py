"""Seeded random streams and Monte Carlo reductions.

Normals are generated in fixed-size blocks. Block ``b`` of a stream with
seed ``s`` is drawn from ``SeedSequence(s, spawn_key=(b,))``, so a path keeps
its increments when the path count changes, and the result does not depend
on how many workers produced the blocks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray

from .errors import ModelDomainError

logger = logging.getLogger(__name__)

# --- Constants ---
DEFAULT_BLOCK_SIZE: int = 1024


class MeanEstimate(NamedTuple):
    """Sample mean with its standard error."""

    mean: float
    std_err: float
    count: int

    def within(self, target: float, n_se: float = 3.0) -> bool:
        """True if ``target`` lies within ``n_se`` standard errors."""
        return abs(self.mean - target) <= n_se * self.std_err

    def at_most(self, bound: float, n_se: float = 3.0) -> bool:
        """True if the mean does not exceed ``bound`` by more than ``n_se`` SE."""
        return self.mean <= bound + n_se * self.std_err


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent integer seed from ``seed`` and a key path."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _block_normals(
    seed: int, block: int, block_size: int, shape: tuple, antithetic: bool
) -> NDArray[np.float64]:
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(block,))
    )
    if not antithetic:
        return rng.standard_normal((block_size, *shape))
    half = rng.standard_normal((block_size // 2, *shape))
    paired = np.empty((block_size, *shape))
    paired[0::2] = half
    paired[1::2] = -half
    return paired


def standard_normals(
    seed: int,
    count: int,
    shape: tuple,
    antithetic: bool = True,
    workers: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> NDArray[np.float64]:
    """
    Draw ``count`` independent arrays of standard normals of ``shape``.

    Args:
        seed: Stream seed.
        count: Number of paths. With ``antithetic`` and an odd count the last
            path is a plain draw without its negated partner.
        shape: Per-path shape, e.g. ``(steps, n + 1)``.
        antithetic: Pair path ``2i + 1`` with the negated draws of path ``2i``.
        workers: Threads used to fill blocks; does not change the output.
        block_size: Paths per block (even).

    Returns:
        Array of shape ``(count, *shape)``.
    """
    if count < 1:
        raise ModelDomainError(f"Path count must be positive, got {count}.")
    if block_size % 2:
        raise ModelDomainError(f"Block size must be even, got {block_size}.")
    n_blocks = -(-count // block_size)

    def _draw(block: int) -> NDArray[np.float64]:
        return _block_normals(seed, block, block_size, shape, antithetic)

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_draw, range(n_blocks)))
    else:
        blocks = [_draw(b) for b in range(n_blocks)]
    logger.debug(
        f"Drew {n_blocks} block(s) of normals for seed {seed} "
        f"(count={count}, shape={shape})."
    )
    return np.concatenate(blocks, axis=0)[:count]


def estimate_mean(
    samples: NDArray[np.float64], antithetic: bool = False
) -> MeanEstimate:
    """
    Mean and standard error of per-path samples.

    With antithetic sampling the standard error is computed over pair
    averages, which are the independent units.
    """
    values = np.asarray(samples, dtype=np.float64)
    count = values.shape[0]
    mean = float(np.mean(values))
    if antithetic and count >= 4 and count % 2 == 0:
        units = values.reshape(-1, 2).mean(axis=1)
    else:
        units = values
    if units.shape[0] < 2:
        return MeanEstimate(mean, 0.0, count)
    std_err = float(np.std(units, ddof=1) / np.sqrt(units.shape[0]))
    return MeanEstimate(mean, std_err, count)


def combined_std_err(*std_errs: Optional[float]) -> float:
    """Root-sum-square of independent standard errors."""
    return float(np.sqrt(sum(se**2 for se in std_errs if se is not None)))
