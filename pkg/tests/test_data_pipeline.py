import numpy as np
import pytest

from stnforecast.core.errors import ConfigError, IngestError, InputError, RangeError
from stnforecast.data.exploration import (
    approx_entropy, autocorrelation, grid_summary, patch_series, spatial_correlation_map,
)
from stnforecast.data.grid_io import HEADER, load_grid, save_grid, sidecar_path
from stnforecast.data.objects import GridSeries, NormStats, SynthScenario
from stnforecast.data.patches import extract_patch, fit_norm_stats, make_dataset, split_range, window_ends
from stnforecast.data.synth import diffuse, load_scenario, synth_grid


def neighbour_correlation(grid):
    values = grid.channel("internet").astype(np.float64)
    left, right = values[:, :, :-1].reshape(len(values), -1), values[:, :, 1:].reshape(len(values), -1)
    return np.mean([np.corrcoef(a, b)[0, 1] for a, b in zip(left.T, right.T)])


class TestGridSeries:
    def test_rejects_non_finite(self):
        with pytest.raises(InputError, match=r"\(0, 1, 0, 0\)"):
            GridSeries(values=np.array([[[1.0], [np.inf]]]))

    def test_three_axis_values_get_one_feature(self):
        grid = GridSeries(values=np.zeros((4, 2, 3)))
        assert (grid.T, grid.I, grid.J, grid.F) == (4, 2, 3, 1)

    def test_unknown_feature(self, ramp_grid):
        with pytest.raises(ConfigError):
            ramp_grid.channel("sms_in")

    def test_with_frame_and_window(self, ramp_grid):
        extended = ramp_grid.with_frame(np.full((4, 5), -1.0))
        assert extended.T == 21
        shifted = extended.window(1, 21)
        assert shifted.T == 20
        assert shifted.start_time == ramp_grid.interval
        np.testing.assert_array_equal(shifted.channel("internet")[-1], -1.0)


class TestExtractPatch:
    def test_interior_cell_is_plain_slice(self, ramp_grid):
        patch = extract_patch(ramp_grid, "internet", 2, 2, 10, 1, 3)
        np.testing.assert_array_equal(patch, ramp_grid.channel("internet")[8:11, 1:4, 1:4])

    def test_corner_replicates_edges(self):
        grid = GridSeries(values=np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        patch = extract_patch(grid, "internet", 0, 0, 0, 1, 1)
        np.testing.assert_array_equal(patch[0], [[1, 1, 2], [1, 1, 2], [3, 3, 4]])

    def test_zero_radius_is_cell_history(self, ramp_grid):
        patch = extract_patch(ramp_grid, "internet", 1, 3, 9, 0, 4)
        np.testing.assert_array_equal(patch[:, 0, 0], ramp_grid.channel("internet")[6:10, 1, 3])

    def test_window_before_start(self, ramp_grid):
        with pytest.raises(RangeError):
            extract_patch(ramp_grid, "internet", 0, 0, 2, 1, 6)

    def test_cell_outside_grid(self, ramp_grid):
        with pytest.raises(RangeError):
            extract_patch(ramp_grid, "internet", 4, 0, 10, 1, 3)


class TestNormStats:
    def test_hand_series(self):
        grid = GridSeries(values=np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1))
        stats = fit_norm_stats(grid, "internet", (0, 3))
        assert stats.mean[0, 0] == pytest.approx(4.0)
        assert stats.std[0, 0] == pytest.approx(np.sqrt(8 / 3))
        np.testing.assert_allclose(stats.apply(grid.channel("internet"))[:, 0, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_constant_cell(self):
        grid = GridSeries(values=np.full((5, 1, 2), 3.0))
        stats = fit_norm_stats(grid, "internet", (0, 5))
        np.testing.assert_array_equal(stats.apply(grid.channel("internet")), 0.0)
        np.testing.assert_array_equal(stats.invert(np.zeros((1, 2))), 3.0)

    def test_roundtrip(self, small_grid):
        stats = fit_norm_stats(small_grid, "internet", (0, 200))
        values = small_grid.channel("internet")
        back = stats.invert(stats.apply(values).astype(np.float32))
        assert np.abs(back - values).max() / np.abs(values).max() < 1e-5

    def test_statistics_ignore_later_data(self, small_grid):
        span = split_range(small_grid.T, "train")
        before = fit_norm_stats(small_grid, "internet", span)
        extended = small_grid.with_frame(np.full((6, 6), 1e6))
        after = fit_norm_stats(extended, "internet", span)
        np.testing.assert_array_equal(before.mean, after.mean)
        np.testing.assert_array_equal(before.std, after.std)

    def test_empty_range(self, ramp_grid):
        with pytest.raises(RangeError):
            fit_norm_stats(ramp_grid, "internet", (5, 5))


class TestSplits:
    def test_chronological_and_disjoint(self):
        spans = [split_range(1000, s) for s in ("train", "val", "test")]
        assert spans == [(0, 700), (700, 850), (850, 1000)]

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            split_range(100, "train", (0.5, 0.2, 0.2))

    def test_short_span(self):
        with pytest.raises(ConfigError):
            window_ends((0, 5), 1, 6, 1)


class TestMakeDataset:
    def test_index_arithmetic(self, ramp_grid):
        stats = fit_norm_stats(ramp_grid, "internet", split_range(ramp_grid.T, "train"))
        dataset = make_dataset(ramp_grid, "internet", stats, "train", 6, 1, 6, 1, cells=[(0, 0)])
        assert [s.t_end for s in dataset] == [5, 11]

    def test_stride_one_is_every_admissible_end(self, ramp_grid):
        stats = fit_norm_stats(ramp_grid, "internet", (0, 14))
        dataset = make_dataset(ramp_grid, "internet", stats, "train", 1, 1, 6, 1, cells=[(1, 1)])
        assert [s.t_end for s in dataset] == list(range(5, 13))

    def test_count_is_cells_times_windows(self, ramp_grid):
        stats = fit_norm_stats(ramp_grid, "internet", (0, 14))
        dataset = make_dataset(ramp_grid, "internet", stats, "train", 6, 1, 6, 1)
        assert len(dataset) == 4 * 5 * 2

    def test_samples_match_normalized_patches(self, ramp_grid):
        stats = fit_norm_stats(ramp_grid, "internet", (0, 14))
        dataset = make_dataset(ramp_grid, "internet", stats, "train", 6, 2, 6, 2)
        normalized = GridSeries(values=stats.apply(ramp_grid.channel("internet")))
        for k in (0, 7, len(dataset) - 1):
            sample = dataset[k]
            i, j = sample.cell
            expected = extract_patch(normalized, "internet", i, j, sample.t_end, 2, 6)
            np.testing.assert_allclose(sample.input, expected, atol=1e-5)
            future = ramp_grid.channel("internet")[sample.t_end + 1:sample.t_end + 3, i, j]
            np.testing.assert_allclose(sample.target, stats.apply_cell(future, i, j), atol=1e-5)

    def test_batch_shapes(self, ramp_grid):
        stats = fit_norm_stats(ramp_grid, "internet", (0, 14))
        dataset = make_dataset(ramp_grid, "internet", stats, "train", 6, 1, 6, 1)
        inputs, targets = dataset.batch([0, 3, 5])
        assert inputs.shape == (3, 6, 3, 3)
        assert targets.shape == (3, 1)

    def test_stats_must_fit_grid(self, ramp_grid):
        stats = NormStats(mean=np.zeros((2, 2)), std=np.ones((2, 2)))
        with pytest.raises(ConfigError):
            make_dataset(ramp_grid, "internet", stats, "train", 6, 1, 6, 1)


class TestSynth:
    def test_flat_scenario_is_constant_in_time(self):
        grid = synth_grid(SynthScenario(I=5, J=4, T=50, noise_sd=0.0, daily_amp=0.0, weekly_amp=0.0))
        values = grid.channel("internet")
        np.testing.assert_allclose(values, np.broadcast_to(values[0], values.shape), rtol=1e-6)

    def test_same_seed_same_series(self):
        scenario = SynthScenario(I=4, J=4, T=100)
        np.testing.assert_array_equal(synth_grid(scenario, 3).values, synth_grid(scenario, 3).values)
        assert not np.array_equal(synth_grid(scenario, 3).values, synth_grid(scenario, 4).values)

    def test_daily_cycle_dominates_autocorrelation(self):
        grid = synth_grid(SynthScenario(I=3, J=3, T=2016, noise_sd=1.0), seed=0)
        acf = autocorrelation(grid.channel("internet")[:, 1, 1], lags=(100, 144)).set_index("lag")["acf"]
        assert acf[144] > acf[100]

    def test_diffusion_raises_neighbour_correlation(self):
        base = dict(I=6, J=6, T=500, noise_sd=20.0)
        still = synth_grid(SynthScenario(**base, diffusion=0.0), seed=2)
        mixed = synth_grid(SynthScenario(**base, diffusion=0.5), seed=2)
        assert neighbour_correlation(mixed) > neighbour_correlation(still)

    def test_diffuse_keeps_constant_fields(self):
        values = np.full((2, 3, 3), 4.0)
        np.testing.assert_allclose(diffuse(values, 0.7), values, rtol=1e-12)

    def test_non_negative(self):
        grid = synth_grid(SynthScenario(I=4, J=4, T=300, base=1.0, noise_sd=10.0), seed=1)
        assert grid.values.min() >= 0.0

    def test_scenario_file(self, tmp_path):
        path = tmp_path / "scenario.cfg"
        path.write_text("I=7\nJ=3\nT=12\nnoise_sd=0.5\n")
        scenario = load_scenario(path)
        assert (scenario.I, scenario.J, scenario.T, scenario.noise_sd) == (7, 3, 12, 0.5)

    def test_scenario_unknown_key_is_named(self, tmp_path):
        path = tmp_path / "scenario.cfg"
        path.write_text("I=7\nbogus=1\n")
        with pytest.raises(ConfigError, match="bogus"):
            load_scenario(path)


class TestExploration:
    def test_constant_series_has_zero_entropy(self):
        assert approx_entropy(np.full(50, 3.0)) == 0.0

    def test_sine_is_more_regular_than_shuffled(self, rng):
        sine = np.sin(np.linspace(0, 8 * np.pi, 200))
        assert approx_entropy(sine) < approx_entropy(rng.permutation(sine))

    def test_short_series(self):
        with pytest.raises(RangeError):
            approx_entropy([1.0, 2.0, 3.0])

    def test_entropy_is_non_negative(self, rng):
        assert approx_entropy(rng.normal(size=120)) >= 0.0

    def test_patch_aggregation_is_smoother(self, small_grid):
        cell = small_grid.channel("internet")[:, 3, 3]
        patch = patch_series(small_grid, "internet", 3, 3, 2)
        assert patch.shape == (small_grid.T,)
        assert patch.std() <= cell.std() * 1.5

    def test_lags_beyond_length_are_skipped(self, rng):
        frame = autocorrelation(rng.normal(size=50), lags=(1, 10, 60))
        assert list(frame["lag"]) == [1, 10]

    def test_spatial_correlation(self, rng):
        values = rng.normal(size=(1000, 3, 3))
        values[:, 0, 2] = values[:, 1, 1]
        values[:, 2, 2] = 5.0
        corr = spatial_correlation_map(GridSeries(values=values), "internet", (1, 1))
        assert corr[1, 1] == pytest.approx(1.0)
        assert corr[0, 2] == pytest.approx(1.0)
        assert corr[2, 2] == 0.0
        others = np.delete(corr.ravel(), [2, 4, 8])
        assert np.abs(others).max() < 0.2

    def test_grid_summary(self, ramp_grid):
        summary = grid_summary(ramp_grid, "internet")
        totals = ramp_grid.channel("internet").sum(axis=(1, 2))
        assert summary.mean == pytest.approx(totals.mean())
        assert summary.T == 20


class TestGridFile:
    def test_roundtrip(self, small_grid, tmp_path):
        path = save_grid(small_grid, tmp_path / "grid.bin")
        assert path.stat().st_size == HEADER.itemsize + small_grid.values.size * 4
        loaded = load_grid(path)
        np.testing.assert_array_equal(loaded.values, small_grid.values)
        assert (loaded.start_time, loaded.interval) == (small_grid.start_time, small_grid.interval)

    def test_bad_magic(self, small_grid, tmp_path):
        path = save_grid(small_grid, tmp_path / "grid.bin")
        raw = bytearray(path.read_bytes())
        raw[:4] = b"GRIX"
        path.write_bytes(bytes(raw))
        with pytest.raises(IngestError, match="magic"):
            load_grid(path)

    def test_truncated_payload(self, small_grid, tmp_path):
        path = save_grid(small_grid, tmp_path / "grid.bin")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(IngestError, match="payload"):
            load_grid(path)

    def test_single_feature_name_survives_reload(self, tmp_path):
        grid = GridSeries(values=np.ones((4, 2, 2, 1), dtype=np.float32), feature_names=["sms_in"])
        loaded = load_grid(save_grid(grid, tmp_path / "grid.bin"))
        assert loaded.feature_names == ["sms_in"]
        assert loaded.channel("sms_in").shape == (4, 2, 2)

    def test_missing_sidecar_falls_back_to_defaults(self, small_grid, tmp_path, monkeypatch):
        monkeypatch.delenv("STN_FEATURE", raising=False)
        path = save_grid(small_grid, tmp_path / "grid.bin")
        sidecar_path(path).unlink()
        assert load_grid(path).feature_names == ["internet"]

    def test_sidecar_must_match_channel_count(self, small_grid, tmp_path):
        path = save_grid(small_grid, tmp_path / "grid.bin")
        sidecar_path(path).write_text('{"feature_names": ["sms_in", "sms_out"]}')
        with pytest.raises(IngestError, match="F=1"):
            load_grid(path)
