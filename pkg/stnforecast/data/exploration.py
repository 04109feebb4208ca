"""
Exploratory statistics of a grid: approximate entropy, autocorrelation,
spatial correlation against a center cell, and whole-grid summaries.
"""
import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel

from stnforecast.core.errors import RangeError
from stnforecast.data.objects import GridSeries
from stnforecast.data.patches import check_cell, extract_patch

logger = logging.getLogger(__name__)

DEFAULT_LAGS = (1, 6, 12, 72, 100, 144, 288, 1008)


def _phi(x: np.ndarray, m: int, tolerance: float) -> float:
    templates = sliding_window_view(x, m)
    count = len(templates)
    matches = np.zeros(count)
    # row blocks keep the pairwise distance matrix bounded
    for start in range(0, count, 512):
        block = templates[start:start + 512]
        dist = np.abs(block[:, None, :] - templates[None, :, :]).max(axis=2)
        matches[start:start + 512] = (dist <= tolerance).sum(axis=1)
    return float(np.mean(np.log(matches / count)))


def approx_entropy(series, m: int = 2, r_tol: Optional[float] = None) -> float:
    """
    Φ_m − Φ_{m+1} with Chebyshev template distance and self-matches
    included; ``r_tol`` defaults to 0.2·std. A flat series has entropy 0.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if len(x) <= m + 1:
        raise RangeError(f"approximate entropy needs more than m+1={m + 1} points, got {len(x)}")
    std = x.std()
    if r_tol is None:
        if std == 0:
            return 0.0
        r_tol = 0.2 * std
    return max(0.0, _phi(x, m, r_tol) - _phi(x, m + 1, r_tol))


def autocorrelation(series, lags: Sequence[int] = DEFAULT_LAGS) -> pd.DataFrame:
    """Sample autocorrelation per lag; lags at or beyond the series length are skipped."""
    x = np.asarray(series, dtype=np.float64).ravel()
    centered = x - x.mean()
    denom = float(centered @ centered)
    rows = []
    for lag in lags:
        if lag >= len(x):
            continue
        acf = 0.0 if denom == 0 else float(centered[:-lag or None] @ centered[lag:]) / denom
        rows.append({"lag": int(lag), "acf": acf})
    return pd.DataFrame(rows, columns=["lag", "acf"])


def patch_series(grid: GridSeries, feature: str, i: int, j: int, r: int) -> np.ndarray:
    """Mean of the edge-replicated neighbourhood around (i, j) at every step."""
    patch = extract_patch(grid, feature, i, j, grid.T - 1, r, grid.T)
    return patch.astype(np.float64).mean(axis=(1, 2))


def spatial_correlation_map(grid: GridSeries, feature: str, center) -> np.ndarray:
    """Pearson correlation of every cell's series with the center's; flat series map to 0."""
    i, j = center
    check_cell(grid, i, j)
    if grid.T < 3:
        raise RangeError(f"spatial correlation needs T ≥ 3, got {grid.T}")
    values = grid.channel(feature).astype(np.float64)
    centered = values - values.mean(axis=0)
    ref = centered[:, i, j]
    norms = np.sqrt((centered ** 2).sum(axis=0)) * np.sqrt(ref @ ref)
    cov = np.tensordot(ref, centered, axes=(0, 0))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(norms > 0, cov / norms, 0.0)
    if norms[i, j] > 0:
        corr[i, j] = 1.0
    return np.clip(corr, -1.0, 1.0)


class GridSummary(BaseModel):
    """Statistics of the per-interval grid totals of one feature."""

    feature: str
    T: int
    I: int
    J: int
    mean: float
    std: float
    min: float
    max: float
    zero_fraction: float

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def grid_summary(grid: GridSeries, feature: str) -> GridSummary:
    channel = grid.channel(feature).astype(np.float64)
    totals = channel.sum(axis=(1, 2))
    return GridSummary(
        feature=feature,
        T=grid.T,
        I=grid.I,
        J=grid.J,
        mean=float(totals.mean()),
        std=float(totals.std()),
        min=float(totals.min()),
        max=float(totals.max()),
        zero_fraction=float((channel == 0).mean()),
    )
