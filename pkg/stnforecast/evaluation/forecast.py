"""
Full-grid one-step prediction, autoregressive rollouts and naive baselines.
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stnforecast.core.errors import ContractError, RangeError
from stnforecast.data.objects import GridSeries, NormStats
from stnforecast.data.patches import check_cell
from stnforecast.models.stn import StnModel, forward

logger = logging.getLogger(__name__)

DAY = 144


def _check_t_end(grid: GridSeries, t_end: int, n: int):
    if t_end < n - 1 or t_end >= grid.T:
        raise RangeError(f"t_end={t_end} admits no n={n} window in a grid of T={grid.T}")


def grid_windows(grid: GridSeries, feature: str, stats: NormStats, t_end: int, r: int, n: int,
                 rows: Optional[Tuple[int, int]] = None, cols: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Normalized, edge-replicated windows of every cell in the row/column box
    (default the whole grid), as ``cells×n×P×P`` in row-major cell order.
    """
    _check_t_end(grid, t_end, n)
    frames = stats.apply(grid.channel(feature)[t_end - n + 1:t_end + 1]).astype(np.float32)
    padded = np.pad(frames, ((0, 0), (r, r), (r, r)), mode="edge")
    i0, i1 = rows or (0, grid.I)
    j0, j1 = cols or (0, grid.J)
    side = 2 * r + 1
    region = padded[:, i0:i1 + 2 * r, j0:j1 + 2 * r]
    windows = sliding_window_view(region, (side, side), axis=(1, 2))
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(-1, n, side, side)


def predict_normalized(model: StnModel, windows: np.ndarray) -> np.ndarray:
    """
    Forward ``B×n×P×P`` windows in inference mode; returns ``B×tau``.
    Each window runs on its own so a cell's forecast never depends on which
    other cells share the call (batched BLAS reassociates float32 sums).
    """
    was_training = model.training
    model.eval()
    try:
        out = [forward(model, window).numpy() for window in windows]
    finally:
        model.train(was_training)
    return np.stack(out) if out else np.zeros((0, model.config.tau), dtype=np.float32)


def predict_horizons(model: StnModel, grid: GridSeries, feature: str, stats: NormStats, t_end: int) -> np.ndarray:
    """All ``tau`` horizons of every cell in original units, ``tau×I×J``."""
    config = model.config
    windows = grid_windows(grid, feature, stats, t_end, config.r, config.n)
    z = predict_normalized(model, windows).T.reshape(config.tau, grid.I, grid.J)
    return stats.invert(z)


def predict_grid(model: StnModel, grid: GridSeries, feature: str, stats: NormStats, t_end: int) -> np.ndarray:
    """
    The forecast frame for ``t_end + 1``, ``I×J`` in original units; equal
    cell for cell to extract_patch, forward and invert_cell.
    """
    return predict_horizons(model, grid, feature, stats, t_end)[0]


def _predict_box(model, grid, feature, stats, rows, cols) -> np.ndarray:
    """Next frame with only the cells in the box predicted; the rest repeat the last frame."""
    config = model.config
    frame = grid.channel(feature)[-1].astype(np.float64).copy()
    windows = grid_windows(grid, feature, stats, grid.T - 1, config.r, config.n, rows, cols)
    z = predict_normalized(model, windows)[:, 0].reshape(rows[1] - rows[0], cols[1] - cols[0])
    box = (slice(*rows), slice(*cols))
    frame[box] = z * np.where(stats.std[box] < stats.eps, 0.0, stats.std[box]) + stats.mean[box]
    return frame


def advance_window(work: GridSeries, frame: np.ndarray, feature: str) -> GridSeries:
    """Append the predicted frame and drop the oldest, keeping the window length."""
    return work.with_frame(frame, feature).window(1, work.T + 1)


def autoregressive_forecast(model: StnModel, grid: GridSeries, feature: str, stats: NormStats,
                            cell: Tuple[int, int], t_end: int, steps: int = 6) -> np.ndarray:
    """
    Roll the one-step forecast forward ``steps`` times: each predicted frame
    is appended to the window and the oldest frame dropped, so later steps
    read predicted neighbourhoods. Only the cells that can still reach
    ``cell`` are predicted at each step.
    """
    if steps < 1:
        raise ContractError(f"steps must be at least 1, got {steps}")
    i, j = cell
    check_cell(grid, i, j)
    config = model.config
    _check_t_end(grid, t_end, config.n)
    work = grid.window(t_end - config.n + 1, t_end + 1)
    out = np.zeros(steps)
    for k in range(steps):
        reach = (steps - 1 - k) * config.r
        rows = (max(0, i - reach), min(grid.I, i + reach + 1))
        cols = (max(0, j - reach), min(grid.J, j + reach + 1))
        frame = _predict_box(model, work, feature, stats, rows, cols)
        out[k] = frame[i, j]
        work = advance_window(work, frame, feature)
    return out


def autoregressive_grid(model: StnModel, grid: GridSeries, feature: str, stats: NormStats, t_end: int,
                        steps: int = 6) -> np.ndarray:
    """Full-grid rollout, ``steps×I×J``."""
    if steps < 1:
        raise ContractError(f"steps must be at least 1, got {steps}")
    config = model.config
    _check_t_end(grid, t_end, config.n)
    work = grid.window(t_end - config.n + 1, t_end + 1)
    frames = []
    for _ in range(steps):
        frame = predict_grid(model, work, feature, stats, work.T - 1)
        frames.append(frame)
        work = advance_window(work, frame, feature)
    return np.stack(frames)


def baseline_persistence(grid: GridSeries, t_end: int, feature: Optional[str] = None) -> np.ndarray:
    """Forecast of ``t_end + 1`` as the frame at ``t_end``."""
    if not 0 <= t_end < grid.T:
        raise RangeError(f"t_end={t_end} outside [0, {grid.T})")
    return grid.channel(feature or grid.feature_names[0])[t_end].astype(np.float64)


def baseline_seasonal(grid: GridSeries, t_end: int, period: int = DAY, feature: Optional[str] = None) -> np.ndarray:
    """Forecast of ``t_end + 1`` as the frame one period earlier."""
    source = t_end + 1 - period
    if source < 0 or t_end >= grid.T:
        raise RangeError(f"seasonal baseline at t_end={t_end} needs {period} steps of history")
    return grid.channel(feature or grid.feature_names[0])[source].astype(np.float64)


def rollout_origins(ends: Sequence[int], horizon: int, T: int) -> np.ndarray:
    """Forecast origins whose ``horizon`` future frames all exist."""
    ends = np.asarray(ends)
    return ends[ends + horizon <= T - 1]
