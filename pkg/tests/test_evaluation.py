import json

import numpy as np
import pytest

from stnforecast.core.errors import ContractError, DimensionError, MetricError, RangeError
from stnforecast.data.objects import GridSeries
from stnforecast.data.patches import extract_patch, fit_norm_stats, split_range
from stnforecast.evaluation import (
    ForecastEngine, autoregressive_forecast, autoregressive_grid, baseline_persistence, baseline_seasonal, bench,
    error_analysis, export_report, mae, metric_maps, predict_grid, r2, rmse, ssim, ssim_frames,
)
from stnforecast.evaluation.forecast import grid_windows, predict_horizons, rollout_origins
from stnforecast.models.stn import build_model, count_macs, count_params, forward


@pytest.fixture
def stats(small_grid):
    return fit_norm_stats(small_grid, "internet", split_range(small_grid.T, "train"))


@pytest.fixture
def model(tiny_config):
    return build_model(tiny_config(), seed=7).eval()


class TestPointMetrics:
    def test_hand_values(self):
        assert mae([0.0, 0.0], [3.0, -4.0]) == pytest.approx(3.5)
        assert rmse([0.0, 0.0], [3.0, -4.0]) == pytest.approx(np.sqrt(12.5))

    def test_rmse_dominates_mae(self, rng):
        pred, actual = rng.normal(size=50), rng.normal(size=50)
        assert rmse(pred, actual) >= mae(pred, actual)

    def test_r2(self):
        actual = np.array([1.0, 2.0, 3.0])
        assert r2(actual, actual) == 1.0
        assert r2(np.full(3, 2.0), actual) == pytest.approx(0.0)
        assert r2([1.0, 2.0, 2.0], actual) == pytest.approx(0.5)

    def test_r2_of_flat_actuals(self):
        with pytest.raises(MetricError):
            r2([1.0, 2.0], [3.0, 3.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mae(np.zeros(3), np.zeros(4))


class TestSsim:
    def test_identical_frames(self, rng):
        x = rng.normal(size=(12, 12))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_symmetric_for_fixed_range(self, rng):
        a, b = rng.normal(size=(10, 9)), rng.normal(size=(10, 9))
        assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(b, a, data_range=1.0))

    def test_flat_frames_use_unit_range(self):
        a, b = 2.0, 3.0
        c1 = 0.01 ** 2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((8, 8), a), np.full((8, 8), b)) == pytest.approx(expected)

    def test_frame_smaller_than_window(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((6, 6)), np.zeros((6, 6)))

    def test_stack_average(self, rng):
        preds, actuals = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
        expected = np.mean([ssim(p, a) for p, a in zip(preds, actuals)])
        assert ssim_frames(preds, actuals) == pytest.approx(expected)

    def test_matches_scikit_image(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        for _ in range(20):
            a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
            expected = metrics.structural_similarity(
                a, b, win_size=7, gaussian_weights=False, use_sample_covariance=False, data_range=np.ptp(b))
            assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


class TestPredictGrid:
    def test_zero_head_forecasts_cell_means(self, model, small_grid, stats):
        model.head.out.weight.data[...] = 0.0
        model.head.out.bias.data[...] = 0.0
        frame = predict_grid(model, small_grid, "internet", stats, 250)
        np.testing.assert_allclose(frame, stats.mean, rtol=1e-12)

    def test_shape(self, tiny_config, small_grid, stats):
        model = build_model(tiny_config(tau=2)).eval()
        assert predict_grid(model, small_grid, "internet", stats, 100).shape == (6, 6)
        assert predict_horizons(model, small_grid, "internet", stats, 100).shape == (2, 6, 6)

    def test_matches_single_cell_forward(self, model, small_grid, stats):
        frame = predict_grid(model, small_grid, "internet", stats, 200)
        normalized = GridSeries(values=stats.apply(small_grid.channel("internet")))
        for i in range(small_grid.I):
            for j in range(small_grid.J):
                window = extract_patch(normalized, "internet", i, j, 200, model.config.r, model.config.n)
                z = forward(model, window).numpy()[0]
                assert frame[i, j] == stats.invert_cell(z, i, j)

    def test_windows_follow_row_major_cells(self, small_grid, stats):
        windows = grid_windows(small_grid, "internet", stats, 10, 1, 3)
        assert windows.shape == (36, 3, 3, 3)
        np.testing.assert_allclose(windows[6 + 2, :, 1, 1], stats.apply_cell(small_grid.channel("internet")[8:11, 1, 2], 1, 2),
                                   atol=1e-5)

    def test_t_end_without_history(self, model, small_grid, stats):
        with pytest.raises(RangeError):
            predict_grid(model, small_grid, "internet", stats, 1)


class TestAutoregressive:
    def test_one_step_is_the_one_step_forecast(self, model, small_grid, stats):
        frame = predict_grid(model, small_grid, "internet", stats, 150)
        rollout = autoregressive_forecast(model, small_grid, "internet", stats, (2, 4), 150, steps=1)
        assert rollout[0] == frame[2, 4]

    def test_grid_rollout_feeds_predictions_back(self, model, small_grid, stats):
        rollout = autoregressive_grid(model, small_grid, "internet", stats, 150, steps=3)
        work = small_grid.window(150 - model.config.n + 1, 151)
        for k in range(3):
            frame = predict_grid(model, work, "internet", stats, work.T - 1)
            np.testing.assert_allclose(rollout[k], frame, rtol=1e-5)
            work = work.with_frame(frame).window(1, work.T + 1)

    def test_cell_rollout_matches_grid_rollout(self, model, small_grid, stats):
        grid_rollout = autoregressive_grid(model, small_grid, "internet", stats, 150, steps=3)
        cell_rollout = autoregressive_forecast(model, small_grid, "internet", stats, (3, 1), 150, steps=3)
        np.testing.assert_allclose(cell_rollout, grid_rollout[:, 3, 1], rtol=1e-4)

    def test_steps_must_be_positive(self, model, small_grid, stats):
        with pytest.raises(ContractError):
            autoregressive_forecast(model, small_grid, "internet", stats, (0, 0), 150, steps=0)

    def test_origins_need_future_frames(self):
        np.testing.assert_array_equal(rollout_origins([5, 10, 15], 3, 18), [5, 10])


class TestBaselines:
    def test_persistence_on_constant_grid(self):
        grid = GridSeries(values=np.full((10, 2, 3), 7.0))
        np.testing.assert_array_equal(baseline_persistence(grid, 4), grid.channel("internet")[5])

    def test_seasonal_on_periodic_grid(self):
        values = np.tile(np.arange(144.0), 3)[:400, None, None] * np.ones((1, 2, 2))
        grid = GridSeries(values=values)
        np.testing.assert_array_equal(baseline_seasonal(grid, 300), grid.channel("internet")[301])

    def test_seasonal_needs_a_period_of_history(self):
        with pytest.raises(RangeError):
            baseline_seasonal(GridSeries(values=np.zeros((200, 1, 1))), 100)


class TestErrorAnalysis:
    def test_fraction_beyond_limit(self):
        result = error_analysis(np.zeros(4), np.array([0.0, 0.0, 0.0, 200.0]))
        assert result.frac_beyond_limit == 0.25
        assert result.max_deviation == 200.0
        assert result.frac_within_band == 0.75

    def test_perfect_prediction(self, rng):
        actual = rng.normal(size=(4, 3, 3))
        result = error_analysis(actual, actual)
        assert result.pearson_r == 1.0
        assert result.min_deviation == result.max_deviation == 0.0
        assert result.frac_within_band == 1.0

    def test_deviation_sign_is_actual_minus_prediction(self):
        result = error_analysis(np.array([1.0, 1.0]), np.array([3.0, 3.0]))
        assert result.min_deviation == 2.0

    def test_cell_and_cluster_ranking(self, rng):
        actual = rng.normal(size=(5, 6, 6))
        pred = actual.copy()
        pred[:, 4, 1] += 10.0
        result = error_analysis(pred, actual, cluster_size=3, top=2)
        assert (result.worst_cells[0].i, result.worst_cells[0].j) == (4, 1)
        assert (result.worst_clusters[0].i0, result.worst_clusters[0].j0) == (3, 0)
        assert result.best_cells[0].mae == 0.0

    def test_maps_average_to_aggregates(self, rng):
        preds, actuals = rng.normal(size=(8, 4, 5)), rng.normal(size=(8, 4, 5))
        maps = metric_maps(preds, actuals)
        assert maps["mae"].mean() == pytest.approx(mae(preds, actuals))
        assert (maps["rmse"] ** 2).mean() == pytest.approx(rmse(preds, actuals) ** 2)

    def test_flat_cell_has_no_r2(self):
        actuals = np.zeros((4, 1, 2))
        actuals[:, 0, 1] = [1.0, 2.0, 3.0, 4.0]
        maps = metric_maps(np.zeros_like(actuals), actuals)
        assert np.isnan(maps["r2"][0, 0]) and np.isfinite(maps["r2"][0, 1])


class TestForecastEngine:
    def test_evaluate_and_export(self, model, small_grid, stats, tmp_path):
        engine = ForecastEngine(model, stats)
        report = engine.evaluate(small_grid, "test", stride=12, autoregressive=3, max_origins=2)
        assert report.frames == len(report.t_ends)
        assert report.samples == report.frames * 36
        assert report.ssim is None
        assert {"persistence", "seasonal"} <= report.baselines.keys()
        assert [s.step for s in report.per_step] == [1, 2, 3]
        assert report.mae == pytest.approx(mae(report.preds, report.actuals))

        written = export_report(report, tmp_path / "eval")
        payload = json.loads(written["report"].read_text())
        assert payload["mae"] == pytest.approx(report.mae)
        assert "maps" not in payload
        for name in ("mae_map", "ecdf", "histogram", "scatter", "per_step", "clusters"):
            assert written[name].exists()

    def test_bind_refits_for_other_layouts(self, model, small_grid, stats):
        engine = ForecastEngine(model, stats)
        other = GridSeries(values=small_grid.values[:, :4, :4])
        refit = engine.bind(other)
        assert refit.shape == (4, 4) and engine.stats_refit
        assert engine.bind(small_grid) is stats

    def test_bench(self, model, small_grid, stats):
        result = bench(ForecastEngine(model, stats), small_grid, reps=2)
        assert result.macs == count_macs(model)
        assert result.params == count_params(model)
        assert result.cells == 36
        assert result.per_cell_ms > 0 and result.full_grid_ms > 0
