"""Load shedding: overload detection, drop-ratio estimation, utility-threshold
selection, and the per-event drop decision for every shedder strategy."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

from .events import Event, StreamSchema
from .models import MlUtilityModel, UtilityTable
from .stats import ObsKey, TypeHistory


class UtilityHistogram:
    """Occurrence fractions of utilities, cumulated in ascending utility order.

    Nearby utilities are pooled into buckets of width ``quantum`` to bound the
    histogram size; each bucket is represented by the largest exact utility it
    contains, which keeps threshold selection exact against raw utilities.
    """

    def __init__(self, values: Sequence[float], fractions: Sequence[float]):
        if len(values) != len(fractions) or not len(values):
            raise ValueError("histogram needs matching non-empty values/fractions")
        if any(f <= 0 for f in fractions):
            raise ValueError("histogram fractions must be positive")
        if list(values) != sorted(values):
            raise ValueError("histogram values must be ascending")
        self.values = [float(v) for v in values]
        self.fractions = [float(f) for f in fractions]
        total = sum(self.fractions)
        self.cumulative = []
        acc = 0.0
        for f in self.fractions:
            acc += f / total
            self.cumulative.append(acc)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, float]], quantum: float = 1e-3) -> "UtilityHistogram":
        """Build from (utility, mass) pairs, pooling by ``quantum``."""
        if quantum <= 0:
            raise ValueError("quantum must be positive")
        reps: dict[int, float] = {}
        mass: dict[int, float] = {}
        for u, m in pairs:
            if m <= 0:
                continue
            b = int(round(u / quantum))
            reps[b] = max(reps.get(b, -math.inf), u)
            mass[b] = mass.get(b, 0.0) + m
        if not mass:
            raise ValueError("empty histogram: no observation mass")
        buckets = sorted(mass)
        return cls([reps[b] for b in buckets], [mass[b] for b in buckets])

    @classmethod
    def from_stats(
        cls,
        utilities: dict[ObsKey, float],
        agg: dict[ObsKey, tuple[float, int]],
        quantum: float = 1e-3,
    ) -> "UtilityHistogram":
        return cls.from_pairs([(u, agg[k][1]) for k, u in utilities.items()], quantum)

    def threshold(self, rho: float) -> float:
        """Smallest utility whose cumulative occurrence fraction reaches ``rho``.

        rho = 0 returns -inf so that nothing satisfies U <= threshold.
        """
        if rho <= 0:
            return -math.inf
        for u, c in zip(self.values, self.cumulative):
            if c >= rho:
                return u
        return self.values[-1]

    def to_payload(self) -> dict:
        return {"values": self.values, "fractions": self.fractions}

    @classmethod
    def from_payload(cls, payload: dict) -> "UtilityHistogram":
        return cls(payload["values"], payload["fractions"])


def select_threshold(histogram: UtilityHistogram, rho: float) -> float:
    """Utility threshold dropping (at least) the requested fraction of events."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be within [0, 1], got {rho}")
    return histogram.threshold(rho)


def estimate_rho(
    arrival_rate: float,
    service_rate: float,
    queue_len: int,
    interval: float,
    rho_max: float = 0.95,
) -> float:
    """Drop fraction covering the rate excess plus draining the backlog over one interval."""
    if arrival_rate <= 0 or service_rate <= 0:
        raise ValueError("rates must be positive")
    rho = 1.0 - service_rate / arrival_rate + queue_len / (arrival_rate * interval)
    return min(max(rho, 0.0), rho_max)


@dataclass
class MonitorConfig:
    latency_bound: float = 1.0
    safety_fraction: float = 0.8
    release_fraction: float = 0.5
    drop_interval: float = 10.0
    ewma_alpha: float = 0.3
    rho_max: float = 0.95
    rho_override: float | None = None


class LoadMonitor:
    """Tracks overload state and the target drop fraction.

    Shedding engages when queue latency reaches the safety fraction of the
    latency bound and releases below the release fraction (hysteresis). The
    drop fraction is re-estimated once per drop interval (and on engagement)
    from EWMA rate estimates plus the current backlog. A fixed ``rho_override``
    pins shedding permanently on at the given fraction, for controlled runs.
    """

    def __init__(self, cfg: MonitorConfig):
        self.cfg = cfg
        self.active = cfg.rho_override is not None
        self.rho = cfg.rho_override or 0.0
        self.queue_latency_ewma: float | None = None
        self._svc_ewma: float | None = None
        self._rate_ewma: float | None = None
        self._bucket_start: float | None = None
        self._bucket_count = 0
        self._next_refresh: float | None = None

    @property
    def arrival_rate(self) -> float | None:
        return self._rate_ewma

    @property
    def service_rate(self) -> float | None:
        if self._svc_ewma is None or self._svc_ewma <= 0:
            return None
        return 1.0 / self._svc_ewma

    def note_service(self, cost: float) -> None:
        a = self.cfg.ewma_alpha
        self._svc_ewma = cost if self._svc_ewma is None else a * cost + (1 - a) * self._svc_ewma

    def _note_arrival(self, ts: float) -> None:
        a = self.cfg.ewma_alpha
        width = self.cfg.drop_interval
        if self._bucket_start is None:
            self._bucket_start = ts
        while ts >= self._bucket_start + width:
            rate = self._bucket_count / width
            self._rate_ewma = rate if self._rate_ewma is None else a * rate + (1 - a) * self._rate_ewma
            self._bucket_start += width
            self._bucket_count = 0
        self._bucket_count += 1

    def _fallback_rate(self, ts: float) -> float | None:
        if self._bucket_start is None or self._bucket_count < 2:
            return None
        elapsed = ts - self._bucket_start
        if elapsed <= 0:
            return None
        return self._bucket_count / elapsed

    def update(self, e: Event, queue_latency: float, now: float, queue_len: int) -> bool:
        """Per-dequeue bookkeeping; returns True when rho changed."""
        cfg = self.cfg
        self._note_arrival(e.ts)
        a = cfg.ewma_alpha
        self.queue_latency_ewma = (
            queue_latency
            if self.queue_latency_ewma is None
            else a * queue_latency + (1 - a) * self.queue_latency_ewma
        )
        if cfg.rho_override is not None:
            return False

        was_active = self.active
        if not self.active and queue_latency >= cfg.safety_fraction * cfg.latency_bound:
            self.active = True
        elif self.active and queue_latency <= cfg.release_fraction * cfg.latency_bound:
            self.active = False

        if self._next_refresh is None:
            self._next_refresh = now + cfg.drop_interval
        refresh = (self.active and not was_active) or now >= self._next_refresh
        if now >= self._next_refresh:
            self._next_refresh = now + cfg.drop_interval
        if not refresh:
            return False

        old_rho = self.rho
        if not self.active:
            self.rho = 0.0
        else:
            lam = self._rate_ewma if self._rate_ewma is not None else self._fallback_rate(e.ts)
            mu = self.service_rate
            if lam is None or mu is None:
                self.rho = cfg.rho_max  # no estimates yet: shed hard until rates are known
            else:
                self.rho = estimate_rho(lam, mu, queue_len, cfg.drop_interval, cfg.rho_max)
        return self.rho != old_rho


class Shedder:
    """Per-event drop decision interface used by the replay loop."""

    kind = "none"

    def on_dequeue(self, e: Event, queue_latency: float, now: float, queue_len: int) -> bool:
        raise NotImplementedError

    def note_service(self, cost: float) -> None:
        pass

    @property
    def active(self) -> bool:
        return False


class NoShedder(Shedder):
    kind = "none"

    def on_dequeue(self, e: Event, queue_latency: float, now: float, queue_len: int) -> bool:
        return False


class _ThresholdShedder(Shedder):
    """Shared logic for strategies that drop events whose predicted utility
    falls at or below the threshold matching the target drop fraction."""

    def __init__(self, monitor: LoadMonitor, histogram: UtilityHistogram):
        self.monitor = monitor
        self.histogram = histogram
        self.u_th = -math.inf
        if monitor.cfg.rho_override is not None:
            self.u_th = select_threshold(histogram, monitor.rho)

    @property
    def active(self) -> bool:
        return self.monitor.active

    def note_service(self, cost: float) -> None:
        self.monitor.note_service(cost)

    def on_dequeue(self, e: Event, queue_latency: float, now: float, queue_len: int) -> bool:
        if self.monitor.update(e, queue_latency, now, queue_len):
            self.u_th = select_threshold(self.histogram, self.monitor.rho)
        drop = False
        if self.monitor.active:
            drop = self._utility(e) <= self.u_th
        self._after_decision(e)
        return drop

    def _utility(self, e: Event) -> float:
        raise NotImplementedError

    def _after_decision(self, e: Event) -> None:
        pass

    def swap(self, histogram: UtilityHistogram) -> None:
        self.histogram = histogram
        self.u_th = select_threshold(histogram, self.monitor.rho)


class TableShedder(_ThresholdShedder):
    """Keyed-table strategy: the drop path costs a handful of XORs plus one
    hash lookup per event, independent of the type-universe size.

    The type history is advanced for every input event, dropped or not: the
    history is defined over the raw input stream, which keeps feature
    distributions identical between training and operation.
    """

    kind = "gspice-h"

    def __init__(
        self,
        monitor: LoadMonitor,
        histogram: UtilityHistogram,
        table: UtilityTable,
        history: TypeHistory,
        schema: StreamSchema,
    ):
        super().__init__(monitor, histogram)
        self.table = table
        self.history = history
        self._schema = schema
        self.last_count_bins = history.count_bins

    def _utility(self, e: Event) -> float:
        key = self.table.keys.key(self.history.k1, self._schema.bin_attrs(e.attrs))
        return self.table.lookup(e.type_id, key)

    def _after_decision(self, e: Event) -> None:
        # keep the pre-push snapshot: an event's features exclude itself
        self.last_count_bins = self.history.count_bins
        self.history.push(e.type_id)

    def swap_model(self, table: UtilityTable, histogram: UtilityHistogram) -> None:
        self.table = table
        self.swap(histogram)


class ModelShedder(_ThresholdShedder):
    """Tree/forest strategy: utilities come from a fitted regression model."""

    def __init__(
        self,
        monitor: LoadMonitor,
        histogram: UtilityHistogram,
        model: MlUtilityModel,
        history: TypeHistory,
        schema: StreamSchema,
        kind: str,
    ):
        super().__init__(monitor, histogram)
        self.model = model
        self.history = history
        self._schema = schema
        self.kind = kind
        self.last_count_bins = history.count_bins

    def _utility(self, e: Event) -> float:
        return self.model.utility_for(e.type_id, self.history.count_bins, self._schema.bin_attrs(e.attrs))

    def _after_decision(self, e: Event) -> None:
        self.last_count_bins = self.history.count_bins
        self.history.push(e.type_id)

    def swap_model(self, model: MlUtilityModel, histogram: UtilityHistogram) -> None:
        self.model = model
        self.swap(histogram)


class PositionShedder(_ThresholdShedder):
    """Baseline scoring events by (type, arrival index inside the newest window).

    Position indices reset at every slide boundary and are pooled into bins of
    fixed width; utilities are credit mass over occurrences per (type, bin).
    Positions beyond the trained range clamp to the type's last trained bin,
    mirroring how attribute binning clamps to edge bins.
    """

    kind = "espice"

    def __init__(
        self,
        monitor: LoadMonitor,
        histogram: UtilityHistogram,
        utilities: dict[tuple[int, int], float],
        defaults: Sequence[float],
        slide: float,
        position_bin_width: int,
    ):
        super().__init__(monitor, histogram)
        self.utilities = dict(utilities)
        self.defaults = list(defaults)
        self.slide = slide
        self.position_bin_width = position_bin_width
        self._max_bin: dict[int, int] = {}
        for tid, pos_bin in self.utilities:
            self._max_bin[tid] = max(self._max_bin.get(tid, 0), pos_bin)
        self._window_k = -1
        self._counter = 0

    def _position(self, e: Event) -> int:
        k = int(math.floor(e.ts / self.slide))
        if k != self._window_k:
            self._window_k = k
            self._counter = 0
        return self._counter

    def _utility(self, e: Event) -> float:
        pos_bin = self._position(e) // self.position_bin_width
        if e.type_id in self._max_bin:
            pos_bin = min(pos_bin, self._max_bin[e.type_id])
        u = self.utilities.get((e.type_id, pos_bin))
        return u if u is not None else self.defaults[e.type_id]

    def _after_decision(self, e: Event) -> None:
        self._counter += 1


class SamplingShedder(Shedder):
    """Baseline converting static per-type scores into drop probabilities.

    Low-scoring types are drained first (score = weighted repetitions of the
    type across pattern bodies times its stream share); within a type, events
    are dropped by seeded uniform sampling at the type's probability, so the
    overall expected drop fraction matches the target.
    """

    kind = "bl"

    def __init__(
        self,
        monitor: LoadMonitor,
        shares: Sequence[float],
        scores: Sequence[float],
        seed: int = 0,
    ):
        if len(shares) != len(scores):
            raise ValueError("one score per type share required")
        self.monitor = monitor
        self.shares = [float(s) for s in shares]
        self.scores = [float(s) for s in scores]
        self._rng = random.Random(seed)
        self._probs = [0.0] * len(shares)
        if monitor.cfg.rho_override is not None:
            self._probs = self.drop_probabilities(monitor.rho)

    @property
    def active(self) -> bool:
        return self.monitor.active

    def note_service(self, cost: float) -> None:
        self.monitor.note_service(cost)

    def drop_probabilities(self, rho: float) -> list[float]:
        """Water-fill: drop whole low-score types first, fractional on the margin."""
        order = sorted(range(len(self.scores)), key=lambda t: (self.scores[t], t))
        probs = [0.0] * len(self.scores)
        remaining = rho
        for t in order:
            if remaining <= 1e-15:
                break
            share = self.shares[t]
            if share <= 0:
                continue
            take = min(share, remaining)
            probs[t] = take / share
            remaining -= take
        return probs

    def on_dequeue(self, e: Event, queue_latency: float, now: float, queue_len: int) -> bool:
        if self.monitor.update(e, queue_latency, now, queue_len):
            self._probs = self.drop_probabilities(self.monitor.rho)
        if not self.monitor.active:
            return False
        p = self._probs[e.type_id]
        if p <= 0.0:
            return False
        return self._rng.random() < p
