import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from stnforecast.core.errors import ConfigError, MetricError, RangeError
from stnforecast.data.objects import GridSeries, NormStats
from stnforecast.data.patches import DEFAULT_FRACTIONS, fit_norm_stats, split_range, window_ends
from stnforecast.evaluation import metrics
from stnforecast.evaluation.analysis import ErrorAnalysis, error_analysis, metric_maps
from stnforecast.evaluation.forecast import (
    DAY, autoregressive_forecast, autoregressive_grid, baseline_persistence, baseline_seasonal, predict_grid,
    rollout_origins,
)
from stnforecast.models.stn import StnModel
from stnforecast.training.checkpoint import load_checkpoint

logger = logging.getLogger(__name__)


class ScoreSet(BaseModel):
    mae: float
    rmse: float
    r2: Optional[float] = None
    ssim: Optional[float] = None

    @classmethod
    def score(cls, preds: np.ndarray, actuals: np.ndarray) -> "ScoreSet":
        try:
            ssim = metrics.ssim_frames(preds, actuals)
        except MetricError as e:
            logger.debug("ssim skipped: %s", e)
            ssim = None
        return cls(mae=metrics.mae(preds, actuals), rmse=metrics.rmse(preds, actuals),
                   r2=metrics.safe_r2(preds, actuals), ssim=ssim)


class StepMetrics(BaseModel):
    step: int
    mae: float
    rmse: float
    r2: Optional[float] = None
    ssim: Optional[float] = None
    median_cell_mae: float
    origins: int


class EvalReport(BaseModel):
    """
    Aggregate metrics are pooled over every (frame, cell) pair; SSIM is the
    mean of per-frame scores. The I×J maps are exported as CSV, not JSON.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    variant: str
    split: str
    feature: str
    frames: int
    samples: int
    mae: float
    rmse: float
    r2: Optional[float] = None
    ssim: Optional[float] = None
    ssim_convention: str = "per-frame mean, 7x7 uniform window"
    baselines: Dict[str, ScoreSet] = Field(default_factory=dict)
    deviation: Optional[ErrorAnalysis] = None
    per_step: List[StepMetrics] = Field(default_factory=list)
    stats_refit: bool = False
    maps: Dict[str, np.ndarray] = Field(default_factory=dict, exclude=True)
    preds: Optional[np.ndarray] = Field(default=None, exclude=True)
    actuals: Optional[np.ndarray] = Field(default=None, exclude=True)
    t_ends: Optional[np.ndarray] = Field(default=None, exclude=True)

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


class ForecastEngine:
    """
    A trained model bound to its normalization statistics and feature.
    Serves one-step grids, rollouts and split evaluations.
    """

    def __init__(self, model: StnModel, stats: Optional[NormStats] = None, feature: str = "internet"):
        self.model = model.eval()
        self.stats = stats if stats is not None else model.norm_stats
        self.feature = feature
        self.stats_refit = False

    @classmethod
    def from_checkpoint(cls, path) -> "ForecastEngine":
        model, state = load_checkpoint(path)
        if model.norm_stats is None:
            raise ConfigError(f"{path}: checkpoint carries no normalization statistics")
        logger.info("loaded %s model from %s", model.config.variant.value, path)
        return cls(model, model.norm_stats, state.feature)

    @property
    def config(self):
        return self.model.config

    def bind(self, grid: GridSeries, fractions=DEFAULT_FRACTIONS, refit: bool = False) -> NormStats:
        """
        Statistics for ``grid``: the checkpoint's when the cell layout matches,
        otherwise (or when asked) refit on the grid's own training span.
        """
        grid.feature_index(self.feature)
        if refit or self.stats is None or self.stats.shape != (grid.I, grid.J):
            logger.info("refitting normalization statistics on the %d×%d grid's training span", grid.I, grid.J)
            self.stats_refit = True
            return fit_norm_stats(grid, self.feature, split_range(grid.T, "train", fractions))
        return self.stats

    def predict(self, grid: GridSeries, t_end: int, stats: Optional[NormStats] = None) -> np.ndarray:
        return predict_grid(self.model, grid, self.feature, stats if stats is not None else self.bind(grid), t_end)

    def rollout(self, grid: GridSeries, cell: Tuple[int, int], t_end: int, steps: int = 6,
                stats: Optional[NormStats] = None) -> np.ndarray:
        return autoregressive_forecast(self.model, grid, self.feature, stats if stats is not None else self.bind(grid), cell, t_end, steps)

    def evaluate(self, grid: GridSeries, split: str = "test", stride: int = 1, fractions=DEFAULT_FRACTIONS,
                 autoregressive: Optional[int] = None, refit: bool = False, limit: float = 100.0,
                 ecdf_band: float = 1.2, max_origins: Optional[int] = None) -> EvalReport:
        config = self.config
        stats = self.bind(grid, fractions, refit)
        ends = window_ends(split_range(grid.T, split, fractions), stride, config.n, 1)
        channel = grid.channel(self.feature).astype(np.float64)

        preds = np.stack([predict_grid(self.model, grid, self.feature, stats, int(t)) for t in ends])
        actuals = channel[ends + 1]
        report = EvalReport(
            variant=config.variant.value,
            split=split,
            feature=self.feature,
            frames=len(ends),
            samples=int(preds.size),
            **ScoreSet.score(preds, actuals).model_dump(),
            baselines=self.baselines(grid, ends, actuals),
            deviation=error_analysis(preds, actuals, limit, ecdf_band),
            stats_refit=self.stats_refit,
            maps=metric_maps(preds, actuals),
            preds=preds,
            actuals=actuals,
            t_ends=ends,
        )
        if autoregressive:
            report.per_step = self.step_table(grid, stats, ends, autoregressive, max_origins)
        logger.info("%s on %s split: MAE %.4f RMSE %.4f", config.variant.value, split, report.mae, report.rmse)
        return report

    def baselines(self, grid: GridSeries, ends: np.ndarray, actuals: np.ndarray) -> Dict[str, ScoreSet]:
        out = {"persistence": ScoreSet.score(
            np.stack([baseline_persistence(grid, int(t), self.feature) for t in ends]), actuals)}
        try:
            seasonal = np.stack([baseline_seasonal(grid, int(t), DAY, self.feature) for t in ends])
            out["seasonal"] = ScoreSet.score(seasonal, actuals)
        except RangeError as e:
            logger.info("seasonal baseline skipped: %s", e)
        return out

    def step_table(self, grid: GridSeries, stats: NormStats, ends: np.ndarray, steps: int,
                   max_origins: Optional[int] = None) -> List[StepMetrics]:
        """Per-step metrics of full-grid rollouts from every origin with ``steps`` future frames."""
        origins = rollout_origins(ends, steps, grid.T)
        if max_origins:
            origins = origins[np.linspace(0, len(origins) - 1, min(max_origins, len(origins))).astype(int)]
        if len(origins) == 0:
            raise RangeError(f"no forecast origin in the split leaves room for {steps} steps")
        channel = grid.channel(self.feature).astype(np.float64)
        rollouts = np.stack([autoregressive_grid(self.model, grid, self.feature, stats, int(t), steps)
                             for t in origins])
        table = []
        for k in range(steps):
            preds = rollouts[:, k]
            actuals = channel[origins + k + 1]
            scores = ScoreSet.score(preds, actuals)
            cell_mae = np.abs(preds - actuals).mean(axis=0)
            table.append(StepMetrics(step=k + 1, **scores.model_dump(), median_cell_mae=float(np.median(cell_mae)),
                                     origins=len(origins)))
        return table


def _timeseries_frame(report: EvalReport, cells) -> pd.DataFrame:
    rows = []
    for rank, cell in cells:
        for t, pred, actual in zip(report.t_ends + 1, report.preds[:, cell.i, cell.j], report.actuals[:, cell.i, cell.j]):
            rows.append({"rank": rank, "i": cell.i, "j": cell.j, "t": int(t), "pred": pred, "actual": actual})
    return pd.DataFrame(rows, columns=["rank", "i", "j", "t", "pred", "actual"])


def export_report(report: EvalReport, out_dir, scatter_points: int = 5000, seed: int = 0) -> Dict[str, Path]:
    """
    Write the report JSON and the plot-ready CSVs: per-cell metric maps,
    ECDF points, histogram bins, a pred/actual scatter sample, the last
    predicted and actual frames, best/worst cell series, cluster summaries
    and the per-step table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"report": out / "report.json"}
    written["report"].write_text(json.dumps(json.loads(report.to_json()), indent=2))

    for name, grid_map in report.maps.items():
        path = out / f"{name}_map.csv"
        pd.DataFrame(grid_map).to_csv(path, index_label="i")
        written[f"{name}_map"] = path
    if report.deviation is not None:
        for name in ("ecdf", "histogram"):
            frame = getattr(report.deviation, name)
            if frame is not None:
                written[name] = out / f"{name}.csv"
                frame.to_csv(written[name], index=False)
        ranked = [("best", c) for c in report.deviation.best_cells] + [("worst", c) for c in report.deviation.worst_cells]
        if ranked and report.preds is not None:
            written["cell_timeseries"] = out / "cell_timeseries.csv"
            _timeseries_frame(report, ranked).to_csv(written["cell_timeseries"], index=False)
        clusters = ([dict(rank="best", **c.model_dump()) for c in report.deviation.best_clusters]
                    + [dict(rank="worst", **c.model_dump()) for c in report.deviation.worst_clusters])
        if clusters:
            written["clusters"] = out / "clusters.csv"
            pd.DataFrame(clusters).to_csv(written["clusters"], index=False)
    if report.preds is not None:
        pred, actual = report.preds.ravel(), report.actuals.ravel()
        take = np.random.default_rng(seed).permutation(len(pred))[:scatter_points]
        written["scatter"] = out / "scatter.csv"
        pd.DataFrame({"pred": pred[np.sort(take)], "actual": actual[np.sort(take)]}).to_csv(written["scatter"], index=False)
        written["snapshot_pred"] = out / "snapshot_pred.csv"
        written["snapshot_actual"] = out / "snapshot_actual.csv"
        pd.DataFrame(report.preds[-1]).to_csv(written["snapshot_pred"], index_label="i")
        pd.DataFrame(report.actuals[-1]).to_csv(written["snapshot_actual"], index_label="i")
    if report.per_step:
        written["per_step"] = out / "per_step.csv"
        pd.DataFrame([s.model_dump() for s in report.per_step]).to_csv(written["per_step"], index=False)
    logger.info("wrote %d report files to %s", len(written), out)
    return written
