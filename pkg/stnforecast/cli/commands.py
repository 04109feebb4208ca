"""
Command-line surface. Results go to stdout as JSON; logs go to stderr.
Exit codes: 0 success, 2 usage or configuration problems, 3 runtime failures.
"""
import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from stnforecast.cli.run_config import config_error, load_run_config
from stnforecast.core.errors import (
    CheckpointError, ConfigError, DimensionError, IngestError, InputError, RangeError, StnError, TrainingError,
)
from stnforecast.core.utils import configure_logging, timed
from stnforecast.data.exploration import (
    approx_entropy, autocorrelation, grid_summary, patch_series, spatial_correlation_map,
)
from stnforecast.data.grid_io import load_grid, save_grid
from stnforecast.data.load_tia import import_tia_with_summary
from stnforecast.data.objects import SynthScenario
from stnforecast.data.patches import check_cell, fit_norm_stats, make_dataset, split_range
from stnforecast.data.synth import load_scenario, synth_grid
from stnforecast.evaluation.bench import bench
from stnforecast.evaluation.report import ForecastEngine, export_report
from stnforecast.models.stn import build_model, count_params
from stnforecast.training.checkpoint import load_checkpoint
from stnforecast.training.trainer import LAST_CHECKPOINT, Trainer

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, RangeError, IngestError, InputError, DimensionError, CheckpointError)
RESOLVED_CONFIG = "run.cfg"


def exit_code(error: Exception) -> int:
    return 2 if isinstance(error, USAGE_ERRORS) else 3


def handle_errors(fn):
    """Turn library errors into a one-line message on stderr and the matching exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as e:
            error = config_error(e, fn.__name__)
            click.echo(f"error: {error}", err=True)
            sys.exit(2)
        except StnError as e:
            message = f"error: {e}"
            if isinstance(e, TrainingError) and e.last_checkpoint:
                message += f" (last checkpoint: {e.last_checkpoint})"
            click.echo(message, err=True)
            sys.exit(exit_code(e))
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)

    return wrapper


def emit(payload):
    """One JSON document on stdout."""
    if hasattr(payload, "to_json"):
        payload = json.loads(payload.to_json())
    click.echo(json.dumps(payload, indent=2))


def parse_cell(text: str):
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"expected i,j but got {text!r}")
    return i, j


def parse_dims(text: str):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected IxJ such as 100x100 but got {text!r}")
    return rows, cols


@click.group()
@click.option("--log-level", default=None, help="Overrides STN_LOG_LEVEL.")
def cli(log_level):
    """Spatiotemporal traffic forecasting with STN models."""
    configure_logging(log_level)


@cli.command()
@click.option("--scenario", type=click.Path(dir_okay=False), default=None, help="key=value scenario file.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def synth(scenario, out, seed):
    """Write a synthetic grid-series file."""
    if scenario is not None and not Path(scenario).is_file():
        raise ConfigError(f"scenario file {scenario} not found")
    settings = load_scenario(scenario) if scenario else SynthScenario()
    grid = synth_grid(settings, seed)
    path = save_grid(grid, out)
    emit({"path": str(path), "T": grid.T, "I": grid.I, "J": grid.J, "F": grid.F,
          "start_time": grid.start_time, "interval": grid.interval, "bytes": path.stat().st_size})


@cli.command("import")
@click.option("--tsv", type=click.Path(), required=True, help="TSV file or directory of TSV files.")
@click.option("--dims", required=True, help="Grid size as IxJ, e.g. 100x100.")
@click.option("--feature", default=None, help="Keep one feature; all five when omitted.")
@click.option("--interval", type=int, default=600, show_default=True)
@click.option("--max-dropped", type=float, default=0.05, show_default=True, help="Tolerated malformed-row fraction.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@handle_errors
def import_tsv(tsv, dims, feature, interval, max_dropped, out):
    """Build a grid-series file from Telecom-Italia-style TSV rows."""
    grid, summary = import_tia_with_summary(tsv, parse_dims(dims), feature, interval, max_dropped)
    save_grid(grid, out)
    emit({**json.loads(summary.to_json()), "path": out, "T": grid.T, "I": grid.I, "J": grid.J, "F": grid.F})


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", default=None, help="Overrides the config's data path.")
@click.option("--out-dir", default=None, help="Overrides the config's out_dir.")
@click.option("--resume/--no-resume", default=False, help="Continue from out_dir/last.stnc when present.")
@click.option("--progress/--no-progress", default=False)
@handle_errors
def train(config_path, data, out_dir, resume, progress):
    """Train a model described by a run config."""
    run = load_run_config(config_path, data=data, out_dir=out_dir)
    model_config, train_config = run.resolve()
    if not run.data:
        raise ConfigError("run config has no data path")
    grid = load_grid(run.data)
    grid.feature_index(run.feature)
    out = Path(run.out_dir)
    run.write_resolved(out / RESOLVED_CONFIG)

    stats = fit_norm_stats(grid, run.feature, split_range(grid.T, "train", run.splits))
    train_set = make_dataset(grid, run.feature, stats, "train", run.train_stride, model_config.r, model_config.n,
                             model_config.tau, run.splits)
    val_set = make_dataset(grid, run.feature, stats, "val", run.val_stride, model_config.r, model_config.n,
                           model_config.tau, run.splits)

    state = None
    if resume and (out / LAST_CHECKPOINT).exists():
        model, state = load_checkpoint(out / LAST_CHECKPOINT)
        if model.config != model_config:
            raise ConfigError(f"{out / LAST_CHECKPOINT} was trained with a different model config")
        logger.info("resuming from epoch %d", state.epoch)
    else:
        model = build_model(model_config, seed=train_config.seed)
    model.norm_stats = stats
    logger.info("%s: %d parameters, %d train / %d val samples", model_config.variant.value, count_params(model),
                len(train_set), len(val_set))
    with timed("training"):
        result = Trainer(model, train_config, out, state, progress).fit(train_set, val_set)
    emit(result)


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--stride", type=int, default=1, show_default=True)
@click.option("--autoregressive", type=int, default=None, help="Also roll out this many steps per origin.")
@click.option("--max-origins", type=int, default=None, help="Cap on rollout origins for the per-step table.")
@click.option("--refit-stats/--no-refit-stats", default=False,
              help="Normalize with statistics of this grid's training span.")
@click.option("--limit", type=float, default=100.0, show_default=True)
@click.option("--ecdf-band", type=float, default=1.2, show_default=True)
@click.option("--out-dir", default=None)
@handle_errors
def evaluate(checkpoint, data, split, stride, autoregressive, max_origins, refit_stats, limit, ecdf_band, out_dir):
    """Evaluate a checkpoint on a grid split and export the report files."""
    engine = ForecastEngine.from_checkpoint(checkpoint)
    grid = load_grid(data)
    report = engine.evaluate(grid, split, stride, autoregressive=autoregressive, refit=refit_stats, limit=limit,
                             ecdf_band=ecdf_band, max_origins=max_origins)
    out = Path(out_dir or Path(os.getenv("STN_OUTPUT_DIR", "runs")) / f"eval_{split}")
    export_report(report, out)
    emit(report)


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--cell", required=True, help="Cell as i,j.")
@click.option("--t", "t_end", type=int, required=True, help="Index of the last observed step.")
@click.option("--steps", type=int, default=1, show_default=True)
@handle_errors
def predict(checkpoint, data, cell, t_end, steps):
    """Print denormalized forecasts of one cell."""
    engine = ForecastEngine.from_checkpoint(checkpoint)
    grid = load_grid(data)
    i, j = parse_cell(cell)
    check_cell(grid, i, j)
    values = engine.rollout(grid, (i, j), t_end, steps)
    emit({"cell": [i, j], "t": t_end, "feature": engine.feature, "forecast": [float(v) for v in values]})


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--cell", required=True, help="Cell as i,j.")
@click.option("--feature", default=None)
@click.option("--r", "radius", type=int, default=5, show_default=True, help="Patch radius for the aggregated series.")
@click.option("--out-dir", default=None)
@handle_errors
def analyze(data, cell, feature, radius, out_dir):
    """Approximate entropy, autocorrelation and spatial correlation around a cell."""
    grid = load_grid(data)
    if feature is None:
        preferred = os.getenv("STN_FEATURE", "internet")
        feature = preferred if preferred in grid.feature_names else grid.feature_names[0]
    grid.feature_index(feature)
    i, j = parse_cell(cell)
    check_cell(grid, i, j)
    series = grid.channel(feature)[:, i, j]
    acf = autocorrelation(series)
    correlation = spatial_correlation_map(grid, feature, (i, j))
    out = Path(out_dir or Path(os.getenv("STN_OUTPUT_DIR", "runs")) / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    acf.to_csv(out / "autocorrelation.csv", index=False)
    np.savetxt(out / "spatial_correlation.csv", correlation, delimiter=",", fmt="%.6f")
    emit({
        "cell": [i, j],
        "feature": feature,
        "apen_cell": approx_entropy(series),
        "apen_patch": approx_entropy(patch_series(grid, feature, i, j, radius)),
        "autocorrelation": acf.to_dict(orient="records"),
        "summary": json.loads(grid_summary(grid, feature).to_json()),
        "spatial_correlation_csv": str(out / "spatial_correlation.csv"),
    })


@cli.command("bench")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), default=None,
              help="Grid to time on; a small synthetic grid when omitted.")
@click.option("--reps", type=int, default=10, show_default=True)
@handle_errors
def bench_command(checkpoint, data, reps):
    """Median inference latency, MAC count and parameter count of a checkpoint."""
    engine = ForecastEngine.from_checkpoint(checkpoint)
    if data:
        grid = load_grid(data)
    else:
        rows, cols = engine.stats.shape
        grid = synth_grid(SynthScenario(I=rows, J=cols, T=engine.config.n + 1, feature=engine.feature))
    result = bench(engine, grid, reps)
    emit(result)


def main():
    cli(prog_name="stn")
