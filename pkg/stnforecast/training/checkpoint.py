"""
Checkpoint file: magic "STNC", u16 version, then length-prefixed sections

    u16 name length | name (utf-8) | u8 dtype code | u64 payload length | payload

with dtype codes ``f`` (little-endian float32), ``d`` (float64) and ``u``
(utf-8 text). Sections: ``manifest`` (key=value lines), ``history`` (CSV),
``norm.mean``/``norm.std``, ``param.<name>``, ``state.<name>`` (batch-norm
running statistics), ``adam.m.<name>`` and ``adam.v.<name>``.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from stnforecast.core.errors import CheckpointError
from stnforecast.data.objects import NormStats
from stnforecast.models.config import ModelConfig
from stnforecast.models.stn import StnModel, build_model
from stnforecast.training.objects import HistoryLog, TrainConfig, TrainState
from stnforecast.training.optim import AdamState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STNC"
CHECKPOINT_VERSION = 1
_DTYPES = {"f": np.dtype("<f4"), "d": np.dtype("<f8")}


def _section(name: str, code: str, payload: bytes) -> bytes:
    encoded = name.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded + code.encode("ascii") + struct.pack("<Q", len(payload)) + payload


def _array_section(name: str, array: np.ndarray) -> bytes:
    code = "d" if array.dtype == np.float64 else "f"
    return _section(name, code, np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def _text_section(name: str, text: str) -> bytes:
    return _section(name, "u", text.encode("utf-8"))


def build_manifest(model: StnModel, state: TrainState) -> Dict[str, str]:
    manifest = {"format": "stnforecast-checkpoint"}
    for key, value in model.config.model_dump(mode="json").items():
        manifest[f"model.{key}"] = json.dumps(value)
    for key, value in state.config.model_dump(mode="json").items():
        manifest[f"train.{key}"] = json.dumps(value)
    manifest.update({
        "epoch": str(state.epoch),
        "step": str(state.step),
        "seed": str(state.seed),
        "feature": state.feature,
        "adam.t": str(state.adam.t),
    })
    for name, tensor in model.named_parameters():
        manifest[f"shape.{name}"] = ",".join(str(d) for d in tensor.shape)
    if model.norm_stats is not None:
        manifest["norm.shape"] = ",".join(str(d) for d in model.norm_stats.shape)
        manifest["norm.eps"] = repr(model.norm_stats.eps)
    return manifest


def checkpoint_bytes(model: StnModel, state: TrainState) -> bytes:
    manifest = build_manifest(model, state)
    chunks: List[bytes] = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    chunks.append(_text_section("manifest", "".join(f"{k}={v}\n" for k, v in manifest.items())))
    chunks.append(_text_section("history", HistoryLog(state.history).to_csv()))
    if model.norm_stats is not None:
        chunks.append(_array_section("norm.mean", model.norm_stats.mean.astype(np.float64)))
        chunks.append(_array_section("norm.std", model.norm_stats.std.astype(np.float64)))
    for name, tensor in model.named_parameters():
        chunks.append(_array_section(f"param.{name}", tensor.data))
    for name, bn in model.named_states():
        chunks.append(_array_section(f"state.{name}.running_mean", bn.running_mean))
        chunks.append(_array_section(f"state.{name}.running_var", bn.running_var))
    for name in state.adam.m:
        chunks.append(_array_section(f"adam.m.{name}", state.adam.m[name]))
        chunks.append(_array_section(f"adam.v.{name}", state.adam.v[name]))
    return b"".join(chunks)


def save_checkpoint(model: StnModel, state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state))
    tmp.replace(path)
    logger.debug("saved checkpoint %s (%s)", path, state)
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, count: int, field: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {field}")
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def sections(self) -> Iterator[Tuple[str, str, bytes]]:
        while self.pos < len(self.raw):
            (length,) = struct.unpack("<H", self.take(2, "section name length"))
            name = self.take(length, "section name").decode("utf-8")
            code = self.take(1, f"{name} dtype").decode("ascii")
            (size,) = struct.unpack("<Q", self.take(8, f"{name} length"))
            yield name, code, self.take(size, name)


def read_sections(path) -> Dict[str, Tuple[str, bytes]]:
    raw = Path(path).read_bytes()
    reader = _Reader(raw, path)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    (version,) = struct.unpack("<H", reader.take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {CHECKPOINT_VERSION})")
    return {name: (code, payload) for name, code, payload in reader.sections()}


def _text(sections, name: str, path) -> str:
    if name not in sections:
        raise CheckpointError(f"{path}: missing section {name}")
    code, payload = sections[name]
    if code != "u":
        raise CheckpointError(f"{path}: section {name} is not text")
    return payload.decode("utf-8")


def _array(sections, name: str, shape, path) -> np.ndarray:
    if name not in sections:
        raise CheckpointError(f"{path}: missing section {name}")
    code, payload = sections[name]
    if code not in _DTYPES:
        raise CheckpointError(f"{path}: section {name} has unknown dtype code {code!r}")
    array = np.frombuffer(payload, dtype=_DTYPES[code])
    if array.size != int(np.prod(shape)):
        raise CheckpointError(f"{path}: section {name} holds {array.size} values, expected shape {tuple(shape)}")
    return array.reshape(shape).astype(_DTYPES[code].newbyteorder("="))


def parse_manifest(text: str) -> Dict[str, str]:
    manifest = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            manifest[key] = value
    return manifest


def _prefixed(manifest: Dict[str, str], prefix: str, path) -> Dict:
    try:
        return {k[len(prefix):]: json.loads(v) for k, v in manifest.items() if k.startswith(prefix)}
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: manifest field under {prefix!r} is not valid: {e}") from e


def _int_field(manifest, key, path) -> int:
    if key not in manifest:
        raise CheckpointError(f"{path}: manifest field {key} missing")
    try:
        return int(manifest[key])
    except ValueError as e:
        raise CheckpointError(f"{path}: manifest field {key}={manifest[key]!r} is not an integer") from e


def _shape(text: str) -> Tuple[int, ...]:
    return tuple(int(d) for d in text.split(",")) if text else ()


def load_checkpoint(path) -> Tuple[StnModel, TrainState]:
    sections = read_sections(path)
    manifest = parse_manifest(_text(sections, "manifest", path))
    try:
        config = ModelConfig(**_prefixed(manifest, "model.", path))
        train_config = TrainConfig(**_prefixed(manifest, "train.", path))
    except ValueError as e:
        raise CheckpointError(f"{path}: manifest config rejected: {e}") from e

    model = build_model(config, seed=train_config.seed)
    for name, tensor in model.named_parameters():
        shape = _shape(manifest.get(f"shape.{name}", ""))
        if shape != tensor.shape:
            raise CheckpointError(f"{path}: manifest field shape.{name} is {shape}, model expects {tensor.shape}")
        tensor.data = _array(sections, f"param.{name}", shape, path)
    for name, bn in model.named_states():
        bn.running_mean = _array(sections, f"state.{name}.running_mean", bn.running_mean.shape, path)
        bn.running_var = _array(sections, f"state.{name}.running_var", bn.running_var.shape, path)
    if "norm.shape" in manifest:
        shape = _shape(manifest["norm.shape"])
        model.norm_stats = NormStats(
            mean=_array(sections, "norm.mean", shape, path),
            std=_array(sections, "norm.std", shape, path),
            eps=float(manifest.get("norm.eps", "1e-8")),
        )

    adam = AdamState(t=_int_field(manifest, "adam.t", path))
    for name, tensor in model.named_parameters():
        if f"adam.m.{name}" in sections:
            adam.m[name] = _array(sections, f"adam.m.{name}", tensor.shape, path)
            adam.v[name] = _array(sections, f"adam.v.{name}", tensor.shape, path)
    state = TrainState(
        config=train_config,
        epoch=_int_field(manifest, "epoch", path),
        step=_int_field(manifest, "step", path),
        feature=manifest.get("feature", "internet"),
        adam=adam,
        history=HistoryLog.from_csv_text(_text(sections, "history", path)).fact_epochs,
    )
    logger.debug("loaded checkpoint %s (%s)", path, state)
    return model, state
