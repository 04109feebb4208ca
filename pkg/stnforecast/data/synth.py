import logging
from pathlib import Path

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from stnforecast.core.errors import ConfigError
from stnforecast.data.objects import GridSeries, SynthScenario

logger = logging.getLogger(__name__)

DAY = 144
WEEK = 7 * DAY


def load_scenario(path=None, **overrides) -> SynthScenario:
    """Scenario from a key=value file; unknown keys are rejected by name."""
    values = dict(dotenv_values(Path(path))) if path else {}
    values.update(overrides)
    try:
        return SynthScenario(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"scenario key {key!r}: {first['msg']}") from e


def spatial_profile(scenario: SynthScenario, rng: np.random.Generator) -> np.ndarray:
    """g(i, j): 1 plus Gaussian hotspot bumps at random centers."""
    ii, jj = np.meshgrid(np.arange(scenario.I), np.arange(scenario.J), indexing="ij")
    profile = np.ones((scenario.I, scenario.J))
    centers = rng.uniform([0, 0], [scenario.I, scenario.J], size=(scenario.hotspots, 2))
    for ci, cj in centers:
        dist2 = (ii - ci) ** 2 + (jj - cj) ** 2
        profile += scenario.hotspot_gain * np.exp(-dist2 / (2 * scenario.hotspot_radius ** 2))
    return profile


def diffuse(values: np.ndarray, weight: float) -> np.ndarray:
    """One pass of (1−w)·v + w·mean(4-neighbourhood) over the last two axes, edges replicated."""
    if weight == 0:
        return values
    padded = np.pad(values, [(0, 0)] * (values.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    neighbours = (padded[..., :-2, 1:-1] + padded[..., 2:, 1:-1] + padded[..., 1:-1, :-2] + padded[..., 1:-1, 2:]) / 4
    return (1 - weight) * values + weight * neighbours


def synth_grid(scenario: SynthScenario = None, seed: int = 0) -> GridSeries:
    """
    value(t,i,j) = base·g(i,j)·(1 + daily·sin(2πt/144) + weekly·sin(2πt/1008))
    + spikes + noise, clipped at zero and diffused once.
    """
    scenario = scenario or SynthScenario()
    rng = np.random.default_rng(seed)
    profile = spatial_profile(scenario, rng)
    t = np.arange(scenario.T, dtype=np.float64)
    cycle = 1 + scenario.daily_amp * np.sin(2 * np.pi * t / DAY) + scenario.weekly_amp * np.sin(2 * np.pi * t / WEEK)
    values = scenario.base * profile[None, :, :] * cycle[:, None, None]

    shape = values.shape
    noise = rng.normal(0.0, 1.0, size=shape) * scenario.noise_sd
    spikes = (rng.random(shape) < scenario.spike_rate) * np.abs(rng.normal(0.0, 1.0, size=shape))
    values = values + noise + spikes * scenario.spike_scale * scenario.noise_sd
    values = diffuse(np.maximum(values, 0.0), scenario.diffusion)

    grid = GridSeries(
        values=values.astype(np.float32)[..., None],
        start_time=scenario.start_time,
        interval=scenario.interval,
        feature_names=[scenario.feature],
    )
    logger.info("synthesized %s (seed %d)", grid, seed)
    return grid
