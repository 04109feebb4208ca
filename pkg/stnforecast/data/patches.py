"""
Supervised patch datasets: (2r+1)×(2r+1) neighbourhoods over the last n
snapshots, edge-replicated at the grid border, normalized per cell with
statistics of the training span.
"""
import logging
import math
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from stnforecast.core.errors import ConfigError, RangeError
from stnforecast.data.objects import GridSeries, NormStats, PatchSample

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


def check_cell(grid: GridSeries, i: int, j: int):
    if not (0 <= i < grid.I and 0 <= j < grid.J):
        raise RangeError(f"cell ({i}, {j}) outside the {grid.I}×{grid.J} grid")


def extract_patch(grid: GridSeries, feature: str, i: int, j: int, t_end: int, r: int, n: int) -> np.ndarray:
    """Raw ``n×(2r+1)×(2r+1)`` window ending at ``t_end``, centered at (i, j)."""
    check_cell(grid, i, j)
    if t_end < n - 1:
        raise RangeError(f"t_end={t_end} leaves no room for an n={n} window (need t_end ≥ {n - 1})")
    if t_end >= grid.T:
        raise RangeError(f"t_end={t_end} outside [0, {grid.T})")
    frames = grid.channel(feature)[t_end - n + 1:t_end + 1]
    rows = np.clip(np.arange(i - r, i + r + 1), 0, grid.I - 1)
    cols = np.clip(np.arange(j - r, j + r + 1), 0, grid.J - 1)
    return frames[:, rows[:, None], cols[None, :]].astype(np.float32)


def split_range(steps: int, split: str, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Tuple[int, int]:
    """Chronological ``[start, stop)`` of a split; boundaries are floors of the cumulative fractions."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {list(fractions)}")
    cumulative = np.cumsum(fractions)
    bounds = [0] + [int(math.floor(steps * c + 1e-9)) for c in cumulative[:2]] + [steps]
    k = SPLITS.index(split)
    return bounds[k], bounds[k + 1]


def fit_norm_stats(grid: GridSeries, feature: str, train_range: Tuple[int, int]) -> NormStats:
    start, stop = train_range
    if not 0 <= start < stop <= grid.T:
        raise RangeError(f"training range [{start}, {stop}) is empty or outside [0, {grid.T})")
    series = grid.channel(feature)[start:stop].astype(np.float64)
    return NormStats(mean=series.mean(axis=0), std=series.std(axis=0))


def window_ends(span: Tuple[int, int], stride: int, n: int, tau: int) -> np.ndarray:
    """Admissible ``t_end`` values whose window and targets both lie inside ``span``."""
    start, stop = span
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    first, last = start + n - 1, stop - tau - 1
    if last < first:
        raise ConfigError(f"split span [{start}, {stop}) is shorter than n+tau={n + tau} steps")
    return np.arange(first, last + 1, stride)


class PatchDataset:
    """
    Lazy sequence of PatchSample over (t_end, i, j) triples. The normalized
    channel is edge-padded once; samples are gathered on demand.
    """

    def __init__(self, grid: GridSeries, feature: str, stats: NormStats, ends: np.ndarray,
                 r: int, n: int, tau: int, cells: Optional[Sequence[Tuple[int, int]]] = None):
        if stats.shape != (grid.I, grid.J):
            raise ConfigError(f"normalization stats {stats.shape} do not fit grid {grid.I}×{grid.J}")
        self.r, self.n, self.tau = r, n, tau
        self.feature = feature
        self.shape = (grid.I, grid.J)
        normalized = stats.apply(grid.channel(feature)).astype(np.float32)
        self.targets = normalized
        self.padded = np.pad(normalized, ((0, 0), (r, r), (r, r)), mode="edge")
        if cells is None:
            ii, jj = np.meshgrid(np.arange(grid.I), np.arange(grid.J), indexing="ij")
            cells = np.stack([ii.ravel(), jj.ravel()], axis=1)
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        for i, j in cells:
            check_cell(grid, int(i), int(j))
        self.index = np.column_stack([
            np.repeat(ends, len(cells)),
            np.tile(cells[:, 0], len(ends)),
            np.tile(cells[:, 1], len(ends)),
        ]).astype(np.int64)

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, k: int) -> PatchSample:
        inputs, targets = self.batch([k])
        t_end, i, j = (int(v) for v in self.index[k])
        return PatchSample(input=inputs[0], target=targets[0], cell=(i, j), t_end=t_end)

    def __iter__(self) -> Iterator[PatchSample]:
        for k in range(len(self)):
            yield self[k]

    def batch(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked inputs ``B×n×P×P`` and targets ``B×tau`` for the given sample indices."""
        rows = self.index[np.asarray(indices, dtype=np.int64)]
        t_end, i, j = rows[:, 0], rows[:, 1], rows[:, 2]
        side = 2 * self.r + 1
        t = t_end[:, None] + np.arange(-self.n + 1, 1)[None, :]
        di = i[:, None] + np.arange(side)[None, :]
        dj = j[:, None] + np.arange(side)[None, :]
        inputs = self.padded[t[:, :, None, None], di[:, None, :, None], dj[:, None, None, :]]
        ahead = t_end[:, None] + np.arange(1, self.tau + 1)[None, :]
        targets = self.targets[ahead, i[:, None], j[:, None]]
        return inputs, targets

    def __str__(self) -> str:
        return f"PatchDataset({len(self)} samples, n={self.n}, r={self.r}, tau={self.tau}, feature={self.feature})"


def make_dataset(
    grid: GridSeries,
    feature: str,
    stats: NormStats,
    split: str,
    stride: int,
    r: int,
    n: int,
    tau: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    cells: Optional[Sequence[Tuple[int, int]]] = None,
) -> PatchDataset:
    span = split_range(grid.T, split, fractions)
    ends = window_ends(span, stride, n, tau)
    dataset = PatchDataset(grid, feature, stats, ends, r, n, tau, cells)
    logger.debug("%s split [%d, %d): %s", split, span[0], span[1], dataset)
    return dataset
