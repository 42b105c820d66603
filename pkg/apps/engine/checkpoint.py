from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apps.engine.autodiff import Parameter
from apps.engine.lbn import LbnDatabase, StatRecord
from apps.engine.models import KwsOdeModel, ModelSpec, model_spec
from apps.engine.trainer import TrainConfig


logger = logging.getLogger(__name__)

MAGIC = b"ODEKWS"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes cannot be parsed; ``section`` names where parsing stopped."""

    def __init__(self, section: str, message: str) -> None:
        super().__init__(f"corrupt checkpoint ({section}): {message}")
        self.section = section


@dataclass(slots=True)
class LayerStats:
    channels: int
    records: list[tuple[float, StatRecord]] = field(default_factory=list)


@dataclass(slots=True)
class Checkpoint:
    variant: str
    digest: str
    tensors: dict[str, np.ndarray]
    lbn: dict[str, LayerStats]
    epoch: int


def config_digest(spec: ModelSpec, cfg: TrainConfig) -> str:
    payload = {"spec": spec.model_dump(mode="json"), "train": cfg.model_dump(mode="json")}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def checkpoint_from_model(model: KwsOdeModel, digest: str, epoch: int) -> Checkpoint:
    lbn = {
        layer_id: LayerStats(channels=layer.channels, records=model.database.records(layer_id))
        for layer_id, layer in sorted(model.norms.items())
        if not model.database.is_empty(layer_id)
    }
    return Checkpoint(
        variant=model.spec.variant,
        digest=digest,
        tensors={param.name: param.data.astype("<f4") for param in model.parameters()},
        lbn=lbn,
        epoch=epoch,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> KwsOdeModel:
    try:
        spec = model_spec(checkpoint.variant)
    except ValueError as exc:
        raise CheckpointFormatError("variant", str(exc)) from exc

    params = {name: Parameter(name, data) for name, data in checkpoint.tensors.items()}
    database = LbnDatabase()
    for layer_id, stats in checkpoint.lbn.items():
        for t, record in stats.records:
            database.put(layer_id, t, StatRecord(mean=record.mean.copy(), var=record.var.copy(), count=record.count))
    try:
        return KwsOdeModel(spec, params, database)
    except ValueError as exc:
        raise CheckpointFormatError("tensors", str(exc)) from exc


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    _put_str(out, checkpoint.variant)
    _put_str(out, checkpoint.digest)

    out += struct.pack("<I", len(checkpoint.tensors))
    for name in sorted(checkpoint.tensors):
        data = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4")
        _put_str(out, name)
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()

    out += struct.pack("<I", len(checkpoint.lbn))
    for layer_id in sorted(checkpoint.lbn):
        stats = checkpoint.lbn[layer_id]
        _put_str(out, layer_id)
        out += struct.pack("<II", stats.channels, len(stats.records))
        for t, record in sorted(stats.records, key=lambda item: item[0]):
            out += struct.pack("<d", t)
            out += np.ascontiguousarray(record.mean, dtype="<f4").tobytes()
            out += np.ascontiguousarray(record.var, dtype="<f4").tobytes()
            out += struct.pack("<Q", record.count)

    out += struct.pack("<I", checkpoint.epoch)
    return bytes(out)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    if reader.take(len(MAGIC), "header") != MAGIC:
        raise CheckpointFormatError("header", "bad magic")
    (version,) = reader.unpack("<I", "header")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError("header", f"unsupported version {version}")

    variant = reader.string("variant")
    digest = reader.string("digest")

    tensors: dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I", "tensors")
    for _ in range(count):
        name = reader.string("tensors")
        (rank,) = reader.unpack("<I", "tensors")
        if rank > 8:
            raise CheckpointFormatError("tensors", f"{name}: implausible rank {rank}")
        dims = reader.unpack(f"<{rank}I", "tensors")
        size = int(np.prod(dims)) if dims else 1
        tensors[name] = reader.floats(size, "tensors").reshape(dims)

    lbn: dict[str, LayerStats] = {}
    (layers,) = reader.unpack("<I", "lbn")
    for _ in range(layers):
        layer_id = reader.string("lbn")
        channels, n_records = reader.unpack("<II", "lbn")
        stats = LayerStats(channels=channels)
        previous = None
        for _ in range(n_records):
            (t,) = reader.unpack("<d", "lbn")
            if previous is not None and t <= previous:
                raise CheckpointFormatError("lbn", f"{layer_id}: time keys out of order")
            mean = reader.floats(channels, "lbn")
            var = reader.floats(channels, "lbn")
            (samples,) = reader.unpack("<Q", "lbn")
            stats.records.append((t, StatRecord(mean=mean, var=var, count=samples)))
            previous = t
        lbn[layer_id] = stats

    (epoch,) = reader.unpack("<I", "trailer")
    if reader.remaining:
        raise CheckpointFormatError("trailer", f"{reader.remaining} unexpected trailing bytes")
    return Checkpoint(variant=variant, digest=digest, tensors=tensors, lbn=lbn, epoch=epoch)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize_checkpoint(checkpoint))
    logger.info("wrote checkpoint %s (%s, epoch %d)", target, checkpoint.variant, checkpoint.epoch)
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    if not source.is_file():
        raise FileNotFoundError(f"checkpoint not found: {source}")
    return parse_checkpoint(source.read_bytes())


def _put_str(out: bytearray, value: str) -> None:
    encoded = value.encode("utf-8")
    out += struct.pack("<I", len(encoded))
    out += encoded


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, size: int, section: str) -> bytes:
        if size < 0 or size > self.remaining:
            raise CheckpointFormatError(section, f"truncated at byte {self.offset}")
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, section: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def string(self, section: str) -> str:
        (size,) = self.unpack("<I", section)
        try:
            return self.take(size, section).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(section, "invalid UTF-8 string") from exc

    def floats(self, count: int, section: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, section), dtype="<f4").astype(np.float32)
