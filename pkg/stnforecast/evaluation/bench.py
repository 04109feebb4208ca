import logging
import time
from typing import Optional

import numpy as np
from pydantic import BaseModel

from stnforecast.core.errors import ContractError
from stnforecast.data.objects import GridSeries
from stnforecast.evaluation.forecast import grid_windows, predict_grid, predict_normalized
from stnforecast.evaluation.report import ForecastEngine
from stnforecast.models.stn import count_macs, count_params

logger = logging.getLogger(__name__)


class BenchResult(BaseModel):
    variant: str
    params: int
    macs: int
    reps: int
    cells: int
    per_cell_ms: float
    full_grid_ms: float

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def _median_ms(fn, reps: int) -> float:
    fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(samples))


def bench(engine: ForecastEngine, grid: GridSeries, reps: int = 10, t_end: Optional[int] = None) -> BenchResult:
    """
    Median wall-clock latency over ``reps`` warm repetitions of a single-cell
    forward and a full-grid prediction, plus the analytic cost of the model.
    """
    if reps < 1:
        raise ContractError(f"reps must be at least 1, got {reps}")
    model, config = engine.model, engine.config
    stats = engine.bind(grid)
    t_end = grid.T - 1 if t_end is None else t_end
    one = grid_windows(grid, engine.feature, stats, t_end, config.r, config.n)[:1]
    result = BenchResult(
        variant=config.variant.value,
        params=count_params(model),
        macs=count_macs(model),
        reps=reps,
        cells=grid.I * grid.J,
        per_cell_ms=_median_ms(lambda: predict_normalized(model, one), reps),
        full_grid_ms=_median_ms(lambda: predict_grid(model, grid, engine.feature, stats, t_end), reps),
    )
    logger.info("bench %s: %.3f ms per cell, %.3f ms per grid", result.variant, result.per_cell_ms, result.full_grid_ms)
    return result
