"""
Point metrics in original (denormalized) units.
"""
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stnforecast.core.errors import DimensionError, MetricError

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match actual shape {actual.shape}")
    if pred.size == 0:
        raise MetricError("metrics need at least one value")
    return pred, actual


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def r2(pred, actual) -> float:
    """1 − SS_res/SS_tot, pooled over every value."""
    pred, actual = _pair(pred, actual)
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0:
        raise MetricError("R² is undefined when the actual values have zero variance")
    return 1.0 - float(np.sum((actual - pred) ** 2)) / ss_tot


def ssim(pred, actual, window: int = SSIM_WINDOW, data_range: Optional[float] = None) -> float:
    """
    Mean SSIM over every ``window``×``window`` uniform window that fits in the
    frame, with population statistics, C1=(0.01·L)² and C2=(0.03·L)². L is the
    range of ``actual`` unless given, and 1 for a flat actual frame.
    """
    pred, actual = _pair(pred, actual)
    if pred.ndim != 2:
        raise DimensionError(f"ssim compares I×J frames, got shape {pred.shape}")
    if min(pred.shape) < window:
        raise MetricError(f"frame {pred.shape} is smaller than the {window}×{window} SSIM window")
    if data_range is None:
        data_range = float(actual.max() - actual.min()) or 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window)).mean(axis=(2, 3))

    mu_a, mu_b = local_mean(pred), local_mean(actual)
    var_a = local_mean(pred * pred) - mu_a ** 2
    var_b = local_mean(actual * actual) - mu_b ** 2
    cov = local_mean(pred * actual) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


def ssim_frames(preds, actuals, window: int = SSIM_WINDOW) -> float:
    """Per-frame SSIM averaged over the leading axis of ``K×I×J`` stacks."""
    preds, actuals = _pair(preds, actuals)
    if preds.ndim == 2:
        return ssim(preds, actuals, window)
    return float(np.mean([ssim(p, a, window) for p, a in zip(preds, actuals)]))


def safe_r2(pred, actual) -> Optional[float]:
    try:
        return r2(pred, actual)
    except MetricError:
        return None
