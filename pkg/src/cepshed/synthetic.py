"""Synthetic workload generation: per-type exponential inter-arrivals merged by time."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import EventStream, StreamSchema

_CHUNK = 4096


@dataclass(frozen=True)
class UniformIntAttr:
    """Uniform integer attribute values in [low, high] (both inclusive)."""

    low: int
    high: int

    def __post_init__(self) -> None:
        if self.low > self.high:
            raise ValueError(f"attribute range low {self.low} > high {self.high}")


@dataclass
class SyntheticSpec:
    """Workload description: per-type mean inter-arrival times plus attribute distributions.

    Exactly one of ``count`` / ``duration`` bounds the stream. The same seed
    always reproduces the identical stream, independently of chunking.
    """

    schema: StreamSchema
    mean_gaps: Sequence[float]
    attr_dists: Sequence[UniformIntAttr]
    count: int | None = None
    duration: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.mean_gaps) != self.schema.n_types:
            raise ValueError("one mean inter-arrival per event type required")
        if any(m <= 0 for m in self.mean_gaps):
            raise ValueError("mean inter-arrival times must be positive")
        if len(self.attr_dists) != self.schema.n_attributes:
            raise ValueError("one attribute distribution per declared attribute required")
        if (self.count is None) == (self.duration is None):
            raise ValueError("exactly one of count / duration must be set")
        if self.count is not None and self.count < 0:
            raise ValueError("count must be non-negative")
        if self.duration is not None and self.duration < 0:
            raise ValueError("duration must be non-negative")

    @property
    def total_rate(self) -> float:
        return sum(1.0 / m for m in self.mean_gaps)


class _TypeDraws:
    """Per-type arrival/attribute sampler that can be extended without replaying."""

    def __init__(self, spec: SyntheticSpec, type_id: int):
        self._mu = float(spec.mean_gaps[type_id])
        self._gap_rng = np.random.default_rng([spec.seed, 11, type_id])
        self._attr_rng = np.random.default_rng([spec.seed, 13, type_id])
        self._dists = spec.attr_dists
        self.times = np.empty(0, dtype=np.float64)
        self.attrs = np.empty((0, len(self._dists)), dtype=np.float64)
        self._last = 0.0

    def extend_to(self, horizon: float) -> None:
        while self._last <= horizon:
            gaps = self._gap_rng.exponential(self._mu, _CHUNK)
            new_times = self._last + np.cumsum(gaps)
            self._last = float(new_times[-1])
            cols = [
                self._attr_rng.integers(d.low, d.high + 1, size=_CHUNK).astype(np.float64)
                for d in self._dists
            ]
            new_attrs = np.column_stack(cols) if cols else np.empty((_CHUNK, 0))
            self.times = np.concatenate([self.times, new_times])
            self.attrs = np.concatenate([self.attrs, new_attrs])


def generate_synthetic(spec: SyntheticSpec) -> EventStream:
    """Generate the merged stream; equal timestamps order by ascending type id."""
    n_types = spec.schema.n_types
    if spec.count == 0 or spec.duration == 0:
        return EventStream(np.empty(0), np.empty(0, dtype=np.int64), np.empty((0, spec.schema.n_attributes)))

    draws = [_TypeDraws(spec, t) for t in range(n_types)]
    if spec.duration is not None:
        horizon = float(spec.duration)
        for d in draws:
            d.extend_to(horizon)
        return _merge(spec, draws, horizon, limit=None)

    count = int(spec.count)
    horizon = (count + 4.0 * math.sqrt(count) + 16.0) / spec.total_rate
    while True:
        for d in draws:
            d.extend_to(horizon)
        n_available = sum(int(np.searchsorted(d.times, horizon, side="left")) for d in draws)
        if n_available >= count:
            return _merge(spec, draws, horizon, limit=count)
        horizon *= 1.5


def _merge(spec: SyntheticSpec, draws: list[_TypeDraws], horizon: float, limit: int | None) -> EventStream:
    ts_parts, tid_parts, attr_parts = [], [], []
    for tid, d in enumerate(draws):
        n = int(np.searchsorted(d.times, horizon, side="left"))
        ts_parts.append(d.times[:n])
        tid_parts.append(np.full(n, tid, dtype=np.int64))
        attr_parts.append(d.attrs[:n])
    ts = np.concatenate(ts_parts)
    tids = np.concatenate(tid_parts)
    attrs = np.concatenate(attr_parts)
    order = np.lexsort((tids, ts))
    if limit is not None:
        order = order[:limit]
    return EventStream(ts[order], tids[order], attrs[order])
