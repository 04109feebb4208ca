import numpy as np
import pytest

from stnforecast.data.objects import GridSeries, SynthScenario
from stnforecast.data.synth import synth_grid
from stnforecast.models.config import ModelConfig, Variant

# gradient-check scale configuration shared by the model tests
TINY = dict(h=8, b=1, a=2, l=1, f=2, r=2, n=3)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    def make(variant=Variant.STN_SLSTM_TF, **overrides):
        return ModelConfig(**{**TINY, "variant": variant, **overrides})
    return make


@pytest.fixture
def small_grid():
    """A 6×6 grid over two simulated days, one feature."""
    scenario = SynthScenario(I=6, J=6, T=288, hotspots=2, noise_sd=2.0)
    return synth_grid(scenario, seed=1)


@pytest.fixture
def ramp_grid():
    """T×I×J values t + 10·i + 100·j, easy to read back from patches."""
    t, i, j = np.meshgrid(np.arange(20), np.arange(4), np.arange(5), indexing="ij")
    return GridSeries(values=(t + 10 * i + 100 * j).astype(np.float32))
