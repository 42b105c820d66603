from __future__ import annotations

import bisect
import logging
import threading
from dataclasses import dataclass

import numpy as np

from apps.engine.autodiff import Tensor, batch_norm, normalize


logger = logging.getLogger(__name__)

TIME_KEY_DECIMALS = 6
DEFAULT_EPSILON = 1e-5


class EmptyDatabase(RuntimeError):
    pass


@dataclass(slots=True, frozen=True)
class LbnLayer:
    layer_id: str
    channels: int
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(slots=True)
class StatRecord:
    mean: np.ndarray
    var: np.ndarray
    count: int


def quantize_time(t: float) -> float:
    return round(float(t), TIME_KEY_DECIMALS)


class LbnDatabase:
    """Per-layer map from quantized layer time to batch statistics.

    Written by a single training solve at a time, read concurrently at inference.
    """

    def __init__(self) -> None:
        self._keys: dict[str, list[float]] = {}
        self._records: dict[str, dict[float, StatRecord]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return sum(len(keys) for keys in self._keys.values())

    def layer_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._keys)

    def keys(self, layer_id: str) -> list[float]:
        with self._lock:
            return list(self._keys.get(layer_id, []))

    def records(self, layer_id: str) -> list[tuple[float, StatRecord]]:
        """Sorted snapshot of one layer; later merges do not alter the returned records."""
        with self._lock:
            table = self._records.get(layer_id, {})
            return [
                (key, StatRecord(mean=table[key].mean, var=table[key].var, count=table[key].count))
                for key in self._keys.get(layer_id, [])
            ]

    def is_empty(self, layer_id: str) -> bool:
        with self._lock:
            return not self._keys.get(layer_id)

    def merge(self, layer_id: str, t: float, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        """Fold one batch's statistics into the running count-weighted average at ``t``."""
        key = quantize_time(t)
        with self._lock:
            table = self._records.setdefault(layer_id, {})
            keys = self._keys.setdefault(layer_id, [])
            current = table.get(key)
            if current is None:
                bisect.insort(keys, key)
                table[key] = StatRecord(mean=mean.copy(), var=var.copy(), count=count)
                return
            total = current.count + count
            weight = count / total
            current.mean = (current.mean + weight * (mean - current.mean)).astype(current.mean.dtype)
            current.var = (current.var + weight * (var - current.var)).astype(current.var.dtype)
            current.count = total

    def put(self, layer_id: str, t: float, record: StatRecord) -> None:
        key = quantize_time(t)
        with self._lock:
            table = self._records.setdefault(layer_id, {})
            keys = self._keys.setdefault(layer_id, [])
            if key not in table:
                bisect.insort(keys, key)
            table[key] = record

    def reset(self) -> None:
        with self._lock:
            self._keys.clear()
            self._records.clear()


def lbn_train(x: Tensor, t: float, layer: LbnLayer, db: LbnDatabase) -> Tensor:
    """Normalize by the batch's statistics and record them in ``db`` under layer time ``t``."""
    out, mean, var = batch_norm(x, layer.epsilon)
    observations = int(np.prod(x.data.shape[:-1]))
    db.merge(layer.layer_id, t, mean, var, observations)
    return out


def lbn_infer(x: Tensor, t: float, layer: LbnLayer, db: LbnDatabase) -> Tensor:
    stats = interpolate_stats(db, layer, t)
    return normalize(x, stats.mean, stats.var, layer.epsilon)


def interpolate_stats(db: LbnDatabase, layer: LbnLayer, t: float) -> StatRecord:
    """Stored record at ``t``, linear interpolation between the two nearest keys,
    or the nearest endpoint when ``t`` lies outside the stored range."""
    records = db.records(layer.layer_id)
    if not records:
        raise EmptyDatabase(f"no statistics stored for layer {layer.layer_id!r}")

    key = quantize_time(t)
    keys = [item[0] for item in records]
    position = bisect.bisect_left(keys, key)
    if position < len(keys) and keys[position] == key:
        return records[position][1]
    if position == 0:
        return records[0][1]
    if position == len(keys):
        return records[-1][1]

    (t_low, low), (t_high, high) = records[position - 1], records[position]
    weight = (key - t_low) / (t_high - t_low)
    return StatRecord(
        mean=(low.mean + weight * (high.mean - low.mean)).astype(low.mean.dtype),
        var=(low.var + weight * (high.var - low.var)).astype(low.var.dtype),
        count=min(low.count, high.count),
    )


def epoch_reset(db: LbnDatabase) -> LbnDatabase:
    db.reset()
    return db


def naive_bn_infer(x: Tensor, layer: LbnLayer) -> Tensor:
    """Conventional inference-time BN: the current batch's own statistics, no database."""
    out, _, _ = batch_norm(x, layer.epsilon)
    return out
