"""
Grid-series binary file: magic "GRID", u16 version=1, u32 T, I, J, F,
i64 start_time, u32 interval_s, then T·I·J·F little-endian float32 values in
(t, i, j, f) row-major order.

Feature names travel in a JSON sidecar next to the file (``grid.bin.json``);
without one they default by channel count.
"""
import json
import logging
import os
from pathlib import Path
from typing import List, Optional

import numpy as np

from stnforecast.core.errors import IngestError
from stnforecast.data.objects import TIA_FEATURES, GridSeries

logger = logging.getLogger(__name__)

GRID_MAGIC = b"GRID"
GRID_VERSION = 1
HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("T", "<u4"),
    ("I", "<u4"),
    ("J", "<u4"),
    ("F", "<u4"),
    ("start_time", "<i8"),
    ("interval", "<u4"),
])


def default_feature_names(count: int) -> List[str]:
    if count == len(TIA_FEATURES):
        return list(TIA_FEATURES)
    if count == 1:
        return [os.getenv("STN_FEATURE", "internet")]
    return [f"feature{k}" for k in range(count)]


def grid_to_bytes(grid: GridSeries) -> bytes:
    header = np.zeros(1, dtype=HEADER)
    header[0] = (GRID_MAGIC, GRID_VERSION, grid.T, grid.I, grid.J, grid.F, grid.start_time, grid.interval)
    return header.tobytes() + grid.values.astype("<f4").tobytes()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_grid(grid: GridSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(grid_to_bytes(grid))
    sidecar_path(path).write_text(json.dumps({"feature_names": list(grid.feature_names)}))
    logger.info("wrote %s to %s", grid, path)
    return path


def _stored_feature_names(path: Path, count: int) -> Optional[List[str]]:
    sidecar = sidecar_path(path)
    if not sidecar.is_file():
        return None
    try:
        names = json.loads(sidecar.read_text())["feature_names"]
    except (ValueError, KeyError, TypeError) as e:
        raise IngestError(f"{sidecar}: unreadable feature names ({e})") from e
    if not isinstance(names, list) or len(names) != count:
        raise IngestError(f"{sidecar}: lists {names!r} for a grid with F={count}")
    return [str(name) for name in names]


def load_grid(path, feature_names: Optional[List[str]] = None) -> GridSeries:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise IngestError(f"{path}: truncated header ({len(raw)} bytes)")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if header["magic"] != GRID_MAGIC:
        raise IngestError(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != GRID_VERSION:
        raise IngestError(f"{path}: unsupported version {header['version']}")
    shape = tuple(int(header[k]) for k in ("T", "I", "J", "F"))
    expected = int(np.prod(shape)) * 4
    payload = raw[HEADER.itemsize:]
    if len(payload) != expected:
        raise IngestError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    names = feature_names or _stored_feature_names(Path(path), shape[3]) or default_feature_names(shape[3])
    return GridSeries(
        values=values,
        start_time=int(header["start_time"]),
        interval=int(header["interval"]),
        feature_names=names,
    )
