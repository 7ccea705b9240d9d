"""Event stream primitives: schema declaration, events, attribute binning, file I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class StreamFormatError(ValueError):
    """A stream file violates the expected line format."""


@dataclass(frozen=True)
class EventType:
    id: int
    name: str


@dataclass(frozen=True)
class AttributeSpec:
    """Numeric attribute declaration with its binning grid.

    Values are grouped into fixed-size bins over [min_value, max_value];
    out-of-range values clamp to the edge bins.
    """

    name: str
    min_value: float
    max_value: float
    bin_size: float = 1.0

    def __post_init__(self) -> None:
        if self.min_value > self.max_value:
            raise ValueError(f"attribute {self.name!r}: min {self.min_value} > max {self.max_value}")
        if self.bin_size <= 0:
            raise ValueError(f"attribute {self.name!r}: bin_size must be positive")

    @property
    def n_bins(self) -> int:
        """Number of distinct bin indices reachable from values in [min, max]."""
        return int(math.floor((self.max_value - self.min_value) / self.bin_size)) + 1


def bin_value(x: float, spec: AttributeSpec) -> int:
    """Bin index of ``x``: floor((clamp(x) - min) / bin_size)."""
    x = min(max(x, spec.min_value), spec.max_value)
    return int(math.floor((x - spec.min_value) / spec.bin_size))


class StreamSchema:
    """Declares the type universe and the numeric attributes every event carries."""

    def __init__(self, types: Sequence[EventType], attributes: Sequence[AttributeSpec]):
        types = list(types)
        ids = [t.id for t in types]
        if ids != list(range(len(types))):
            raise ValueError("event type ids must be dense 0..n-1 in declaration order")
        names = [t.name for t in types]
        if len(set(names)) != len(names):
            raise ValueError("event type names must be unique")
        self.types: list[EventType] = types
        self.attributes: list[AttributeSpec] = list(attributes)
        self._by_name = {t.name: t for t in types}

    @classmethod
    def from_names(cls, type_names: Sequence[str], attributes: Sequence[AttributeSpec]) -> "StreamSchema":
        return cls([EventType(i, n) for i, n in enumerate(type_names)], attributes)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def type_by_name(self, name: str) -> EventType:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown event type {name!r}") from None

    def bin_attrs(self, attrs: Sequence[float]) -> tuple[int, ...]:
        return tuple(bin_value(x, spec) for x, spec in zip(attrs, self.attributes))

    def attr_index(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise KeyError(f"unknown attribute {name!r}")


@dataclass(slots=True)
class Event:
    """A typed, timestamped stream element with numeric attribute values."""

    seq: int
    ts: float
    type_id: int
    attrs: tuple[float, ...]


class EventStream:
    """Array-backed ordered event sequence.

    Timestamps are logical seconds, non-decreasing with the stream position.
    """

    def __init__(self, ts: np.ndarray, type_ids: np.ndarray, attrs: np.ndarray):
        ts = np.asarray(ts, dtype=np.float64)
        type_ids = np.asarray(type_ids, dtype=np.int64)
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs.reshape(len(ts), -1)
        if not (len(ts) == len(type_ids) == len(attrs)):
            raise ValueError("ts, type_ids and attrs must have equal length")
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        self.ts = ts
        self.type_ids = type_ids
        self.attrs = attrs
        self._rows: list[tuple[float, ...]] | None = None

    def __len__(self) -> int:
        return len(self.ts)

    def __iter__(self) -> Iterator[Event]:
        if self._rows is None:
            self._rows = [tuple(row) for row in self.attrs.tolist()]
        ts = self.ts.tolist()
        tids = self.type_ids.tolist()
        for i in range(len(ts)):
            yield Event(i, ts[i], tids[i], self._rows[i])

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return EventStream(self.ts[idx], self.type_ids[idx], self.attrs[idx])
        return Event(int(idx), float(self.ts[idx]), int(self.type_ids[idx]), tuple(self.attrs[idx]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            np.array_equal(self.ts, other.ts)
            and np.array_equal(self.type_ids, other.type_ids)
            and np.array_equal(self.attrs, other.attrs)
        )

    def type_shares(self, n_types: int) -> np.ndarray:
        """Empirical fraction of each type id in the stream."""
        counts = np.bincount(self.type_ids, minlength=n_types).astype(np.float64)
        return counts / max(len(self), 1)

    def duration(self) -> float:
        return float(self.ts[-1] - self.ts[0]) if len(self) > 1 else 0.0

    def arrival_rate(self) -> float:
        """Mean events per second over the stream extent."""
        d = self.duration()
        if d <= 0:
            return 0.0
        return (len(self) - 1) / d

    def retimed(self, rate_factor: float) -> "EventStream":
        """Copy with inter-arrival gaps divided by ``rate_factor`` (anchored at t=0)."""
        if rate_factor <= 0:
            raise ValueError("rate_factor must be positive")
        base = self.ts[0] if len(self) else 0.0
        return EventStream((self.ts - base) / rate_factor, self.type_ids, self.attrs)

    def shifted_to_zero(self) -> "EventStream":
        base = self.ts[0] if len(self) else 0.0
        return EventStream(self.ts - base, self.type_ids, self.attrs)

    @classmethod
    def from_events(cls, events: Sequence[Event], n_attrs: int) -> "EventStream":
        ts = np.array([e.ts for e in events], dtype=np.float64)
        tids = np.array([e.type_id for e in events], dtype=np.int64)
        attrs = np.array([e.attrs for e in events], dtype=np.float64).reshape(len(events), n_attrs)
        return cls(ts, tids, attrs)


def write_stream(stream: EventStream, path: str, schema: StreamSchema) -> None:
    """Write one ``ts,type,attr1,...,attrN`` line per event."""
    names = [t.name for t in schema.types]
    with open(path, "w") as f:
        for i in range(len(stream)):
            fields = [repr(float(stream.ts[i])), names[int(stream.type_ids[i])]]
            fields.extend(repr(float(v)) for v in stream.attrs[i])
            f.write(",".join(fields) + "\n")


def read_stream(path: str, schema: StreamSchema) -> EventStream:
    """Parse a ``ts,type,attr1,...,attrN`` file into an EventStream.

    Raises StreamFormatError naming the offending line on unknown type names,
    attribute arity mismatches, unparsable numbers, or non-monotonic timestamps.
    """
    n_attrs = schema.n_attributes
    ts_list: list[float] = []
    tid_list: list[int] = []
    attr_rows: list[list[float]] = []
    last_ts = -math.inf
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 + n_attrs:
                raise StreamFormatError(
                    f"{path}:{lineno}: expected {2 + n_attrs} fields (ts,type,{n_attrs} attrs), got {len(parts)}"
                )
            try:
                ts = float(parts[0])
            except ValueError:
                raise StreamFormatError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            try:
                tid = schema.type_by_name(parts[1]).id
            except KeyError:
                raise StreamFormatError(f"{path}:{lineno}: unknown event type {parts[1]!r}") from None
            try:
                row = [float(v) for v in parts[2:]]
            except ValueError:
                raise StreamFormatError(f"{path}:{lineno}: bad attribute value in {parts[2:]!r}") from None
            if ts < last_ts:
                raise StreamFormatError(f"{path}:{lineno}: timestamp {ts} decreases (previous {last_ts})")
            last_ts = ts
            ts_list.append(ts)
            tid_list.append(tid)
            attr_rows.append(row)
    return EventStream(
        np.array(ts_list, dtype=np.float64),
        np.array(tid_list, dtype=np.int64),
        np.array(attr_rows, dtype=np.float64).reshape(len(ts_list), n_attrs),
    )
