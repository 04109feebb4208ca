import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from stnforecast.core.errors import IngestError
from stnforecast.data.objects import TIA_FEATURES, GridSeries

logger = logging.getLogger(__name__)

TIA_COLUMNS = ["square_id", "timestamp_ms", "country_code"] + TIA_FEATURES
TIA_SUFFIXES = (".txt", ".tsv", ".csv")


class ImportSummary(BaseModel):
    files: int
    rows_read: int
    rows_dropped: int
    cells_populated: int
    steps: int

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def _tia_files(path) -> List[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise IngestError(f"{path}: no such file or directory")
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in TIA_SUFFIXES)
    if not files:
        raise IngestError(f"{path}: no TSV files found")
    return files


def _read_file(path: Path) -> Tuple[pd.DataFrame, int]:
    """
    Parse one TSV file. Rows whose square or timestamp is unparseable are
    dropped and counted; empty numeric fields read as 0.
    """
    df = pd.read_csv(path, sep="\t", header=None, names=TIA_COLUMNS, dtype=str,
                     keep_default_na=False, index_col=False)
    df = df.fillna("")
    df["row"] = np.arange(1, len(df) + 1)
    df["square_id"] = pd.to_numeric(df["square_id"].str.strip(), errors="coerce")
    df["timestamp_ms"] = pd.to_numeric(df["timestamp_ms"].str.strip(), errors="coerce")
    malformed = df["square_id"].isna() | df["timestamp_ms"].isna()
    for feature in TIA_FEATURES:
        text = df[feature].str.strip()
        parsed = pd.to_numeric(text.replace("", "0"), errors="coerce")
        malformed |= parsed.isna()
        df[feature] = parsed.fillna(0.0)
    dropped = int(malformed.sum())
    if dropped:
        logger.warning("%s: dropped %d malformed rows (first at row %d)", path, dropped, int(df.loc[malformed, "row"].iloc[0]))
    df = df.loc[~malformed].copy()
    df["file"] = path.name
    return df, dropped


def import_tia_with_summary(
    path,
    grid_dims: Tuple[int, int],
    feature: Optional[str] = None,
    interval: int = 600,
    max_dropped_fraction: float = 0.05,
) -> Tuple[GridSeries, ImportSummary]:
    """
    Build a grid from Telecom-Italia-style TSV rows
    (square_id, timestamp_ms, country_code, sms_in, sms_out, call_in, call_out, internet).

    Rows sharing (square, interval bucket) are summed over country codes;
    square s maps to ((s−1) div J, (s−1) mod J); timestamps floor to the interval.
    """
    rows_i, rows_j = grid_dims
    files = _tia_files(path)
    frames, dropped = [], 0
    for file in files:
        df, lost = _read_file(file)
        frames.append(df)
        dropped += lost
    df = pd.concat(frames, ignore_index=True)
    rows_read = len(df) + dropped
    if rows_read and dropped / rows_read > max_dropped_fraction:
        raise IngestError(f"{dropped} of {rows_read} rows are malformed (limit {max_dropped_fraction:.0%})")
    if df.empty:
        raise IngestError(f"{path}: no usable rows")

    out_of_range = (df["square_id"] < 1) | (df["square_id"] > rows_i * rows_j) | (df["square_id"] % 1 != 0)
    if out_of_range.any():
        bad = df.loc[out_of_range].iloc[0]
        raise IngestError(
            f"{bad['file']} row {int(bad['row'])}: square_id {bad['square_id']:g} outside 1..{rows_i * rows_j}"
        )

    features = TIA_FEATURES if feature is None else [feature]
    if feature is not None and feature not in TIA_FEATURES:
        raise IngestError(f"unknown feature {feature!r}; expected one of {TIA_FEATURES}")

    seconds = (df["timestamp_ms"] // 1000).astype(np.int64)
    df["bucket"] = seconds // interval * interval
    totals = df.groupby(["square_id", "bucket"], sort=True)[features].sum().reset_index()

    start = int(totals["bucket"].min())
    steps = int((totals["bucket"].max() - start) // interval) + 1
    values = np.zeros((steps, rows_i, rows_j, len(features)), dtype=np.float32)
    square = totals["square_id"].to_numpy(dtype=np.int64) - 1
    t = ((totals["bucket"].to_numpy(dtype=np.int64) - start) // interval)
    values[t, square // rows_j, square % rows_j, :] = totals[features].to_numpy(dtype=np.float32)

    grid = GridSeries(values=values, start_time=start, interval=interval, feature_names=list(features))
    summary = ImportSummary(
        files=len(files),
        rows_read=rows_read,
        rows_dropped=dropped,
        cells_populated=int(np.unique(square).size),
        steps=steps,
    )
    logger.info("imported %s from %d rows (%d dropped)", grid, rows_read, dropped)
    return grid, summary


def import_tia_tsv(path, grid_dims: Tuple[int, int], feature: Optional[str] = None, interval: int = 600) -> GridSeries:
    grid, _ = import_tia_with_summary(path, grid_dims, feature, interval)
    return grid
