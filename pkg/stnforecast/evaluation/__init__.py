from stnforecast.evaluation.analysis import ErrorAnalysis, error_analysis, metric_maps
from stnforecast.evaluation.bench import BenchResult, bench
from stnforecast.evaluation.forecast import (
    advance_window, autoregressive_forecast, autoregressive_grid, baseline_persistence, baseline_seasonal,
    grid_windows, predict_grid, predict_horizons,
)
from stnforecast.evaluation.metrics import mae, r2, rmse, ssim, ssim_frames
from stnforecast.evaluation.report import EvalReport, ForecastEngine, StepMetrics, export_report
