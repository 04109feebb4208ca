from stnforecast.data.exploration import (
    GridSummary, approx_entropy, autocorrelation, grid_summary, patch_series, spatial_correlation_map,
)
from stnforecast.data.grid_io import load_grid, save_grid
from stnforecast.data.load_tia import ImportSummary, import_tia_tsv, import_tia_with_summary
from stnforecast.data.objects import TIA_FEATURES, GridSeries, NormStats, PatchSample, SynthScenario
from stnforecast.data.patches import (
    PatchDataset, extract_patch, fit_norm_stats, make_dataset, split_range, window_ends,
)
from stnforecast.data.synth import load_scenario, synth_grid
