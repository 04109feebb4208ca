"""
Deviation statistics behind the error-analysis exports. Deviations are
``actual − pred``: positive values are underpredictions.
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from stnforecast.core.errors import DimensionError

logger = logging.getLogger(__name__)

QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


class CellScore(BaseModel):
    i: int
    j: int
    mae: float


class ClusterScore(BaseModel):
    """Absolute-error five-number summary of a square block of cells."""

    i0: int
    j0: int
    size: int
    mae: float
    min: float
    q1: float
    median: float
    q3: float
    max: float


class ErrorAnalysis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    count: int
    limit: float
    ecdf_band: float
    skewness: float
    frac_beyond_limit: float
    frac_within_band: float
    min_deviation: float
    max_deviation: float
    pearson_r: float
    quantiles: Dict[str, float]
    best_cells: List[CellScore] = Field(default_factory=list)
    worst_cells: List[CellScore] = Field(default_factory=list)
    best_clusters: List[ClusterScore] = Field(default_factory=list)
    worst_clusters: List[ClusterScore] = Field(default_factory=list)
    histogram: Optional[pd.DataFrame] = Field(default=None, exclude=True)
    ecdf: Optional[pd.DataFrame] = Field(default=None, exclude=True)

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def skewness(x: np.ndarray) -> float:
    """Population skewness; 0 for a constant sample."""
    centered = x - x.mean()
    m2 = float(np.mean(centered ** 2))
    if m2 == 0:
        return 0.0
    return float(np.mean(centered ** 3)) / m2 ** 1.5


def pearson(pred: np.ndarray, actual: np.ndarray) -> float:
    """Pearson r; a flat prediction scores 0, and an exact prediction scores 1."""
    if np.array_equal(pred, actual):
        return 1.0
    sp, sa = pred.std(), actual.std()
    if sp == 0 or sa == 0:
        return 0.0
    return float(np.mean((pred - pred.mean()) * (actual - actual.mean())) / (sp * sa))


def ecdf_points(deviation: np.ndarray, points: int = 200) -> pd.DataFrame:
    ordered = np.sort(deviation)
    positions = np.unique(np.linspace(0, len(ordered) - 1, min(points, len(ordered))).round().astype(int))
    return pd.DataFrame({"deviation": ordered[positions], "probability": (positions + 1) / len(ordered)})


def histogram_bins(deviation: np.ndarray, bins: int = 50) -> pd.DataFrame:
    counts, edges = np.histogram(deviation, bins=bins)
    return pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})


def cell_ranking(abs_error: np.ndarray, top: int) -> Tuple[List[CellScore], List[CellScore]]:
    per_cell = abs_error.mean(axis=0)
    order = np.argsort(per_cell, axis=None, kind="stable")
    scores = [CellScore(i=int(k // per_cell.shape[1]), j=int(k % per_cell.shape[1]), mae=float(per_cell.flat[k]))
              for k in order]
    return scores[:top], scores[::-1][:top]


def cluster_ranking(abs_error: np.ndarray, size: int, top: int) -> Tuple[List[ClusterScore], List[ClusterScore]]:
    """Tiles the grid with ``size``×``size`` blocks (edge blocks may be smaller)."""
    _, rows, cols = abs_error.shape
    clusters = []
    for i0 in range(0, rows, size):
        for j0 in range(0, cols, size):
            block = abs_error[:, i0:i0 + size, j0:j0 + size].ravel()
            q = np.quantile(block, [0.0, 0.25, 0.5, 0.75, 1.0])
            clusters.append(ClusterScore(i0=i0, j0=j0, size=size, mae=float(block.mean()), min=q[0], q1=q[1],
                                         median=q[2], q3=q[3], max=q[4]))
    clusters.sort(key=lambda c: c.mae)
    return clusters[:top], clusters[::-1][:top]


def error_analysis(preds, actuals, limit: float = 100.0, ecdf_band: float = 1.2, bins: int = 50,
                   points: int = 200, cluster_size: int = 5, top: int = 3) -> ErrorAnalysis:
    """
    Deviation statistics of paired predictions. ``K×I×J`` stacks also get
    best/worst cells and best/worst square clusters ranked by MAE.
    """
    pred = np.asarray(preds, dtype=np.float64)
    actual = np.asarray(actuals, dtype=np.float64)
    if pred.shape != actual.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match actual shape {actual.shape}")
    if pred.size == 0:
        raise DimensionError("error analysis needs at least one pair")
    deviation = (actual - pred).ravel()
    flat_pred, flat_actual = pred.ravel(), actual.ravel()
    quantiles = np.quantile(deviation, QUANTILES)

    result = ErrorAnalysis(
        count=int(deviation.size),
        limit=limit,
        ecdf_band=ecdf_band,
        skewness=skewness(deviation),
        frac_beyond_limit=float(np.mean(np.abs(deviation) > limit)),
        frac_within_band=float(np.mean(np.abs(deviation) <= ecdf_band)),
        min_deviation=float(deviation.min()),
        max_deviation=float(deviation.max()),
        pearson_r=pearson(flat_pred, flat_actual),
        quantiles={f"q{q:g}": float(v) for q, v in zip(QUANTILES, quantiles)},
        histogram=histogram_bins(deviation, bins),
        ecdf=ecdf_points(deviation, points),
    )
    if pred.ndim == 3:
        abs_error = np.abs(actual - pred)
        result.best_cells, result.worst_cells = cell_ranking(abs_error, top)
        result.best_clusters, result.worst_clusters = cluster_ranking(abs_error, cluster_size, top)
    return result


def metric_maps(preds: np.ndarray, actuals: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Per-cell MAE, RMSE and R² over the leading axis of ``K×I×J`` stacks.
    Cells whose actual series is flat get NaN R².
    """
    diff = actuals - preds
    mse = np.mean(diff ** 2, axis=0)
    ss_tot = np.sum((actuals - actuals.mean(axis=0)) ** 2, axis=0)
    ss_res = np.sum(diff ** 2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2_map = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, np.nan)
    return {"mae": np.mean(np.abs(diff), axis=0), "rmse": np.sqrt(mse), "r2": r2_map}
