"""Per-event feature statistics: recent-type history, observation gathering,
aggregation into (credit mass, occurrence) groups, and utility computation."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .engine import ABANDON_NEGATION, ProcessResult
from .events import Event, StreamSchema
from .zobrist import ZobristKeys

# Aggregation key: (type_id, type-count bins, attribute bins)
ObsKey = tuple[int, tuple[int, ...], tuple[int, ...]]


class TypeHistory:
    """Ring buffer of the most recent ``length`` event types with per-type counts.

    Counts are grouped into bins of ``count_bin_size`` (1 keeps raw counts).
    When constructed with ZobristKeys the composite count key is maintained
    incrementally: at most two bin moves, hence at most four XORs, per push.
    """

    def __init__(
        self,
        n_types: int,
        length: int,
        count_bin_size: int = 1,
        keys: ZobristKeys | None = None,
    ):
        if length < 1:
            raise ValueError("history length must be >= 1")
        if count_bin_size < 1:
            raise ValueError("count bin size must be >= 1")
        self.n_types = n_types
        self.length = length
        self.count_bin_size = count_bin_size
        self._buf: deque[int] = deque()
        self._counts = [0] * n_types
        self._bins = [0] * n_types
        self._keys = keys
        self._k1 = keys.k1_init(self._bins) if keys is not None else 0

    @property
    def counts(self) -> tuple[int, ...]:
        """Raw per-type counts over the buffered history."""
        return tuple(self._counts)

    @property
    def count_bins(self) -> tuple[int, ...]:
        return tuple(self._bins)

    @property
    def k1(self) -> int:
        return self._k1

    def __len__(self) -> int:
        return len(self._buf)

    @staticmethod
    def max_count_bin(length: int, count_bin_size: int = 1) -> int:
        """Largest bin index a type count can reach (counts range 0..length)."""
        return length // count_bin_size

    def push(self, type_id: int) -> int | None:
        """Append one type; returns the evicted type id once the buffer is full."""
        evicted = None
        if len(self._buf) == self.length:
            evicted = self._buf.popleft()
            self._counts[evicted] -= 1
            self._move_bin(evicted)
        self._buf.append(type_id)
        self._counts[type_id] += 1
        self._move_bin(type_id)
        return evicted

    def _move_bin(self, type_id: int) -> None:
        new_bin = self._counts[type_id] // self.count_bin_size
        old_bin = self._bins[type_id]
        if new_bin != old_bin:
            self._bins[type_id] = new_bin
            if self._keys is not None:
                self._k1 = self._keys.k1_update(self._k1, type_id, old_bin, new_bin)


@dataclass(frozen=True, slots=True)
class Observation:
    """One processed event's features plus the weights of everything it contributed to."""

    seq: int
    type_id: int
    count_bins: tuple[int, ...]
    attr_bins: tuple[int, ...]
    credits: tuple[float, ...]

    @property
    def key(self) -> ObsKey:
        return (self.type_id, self.count_bins, self.attr_bins)


class ObservationCollector:
    """Streaming observation gatherer.

    ``observe`` must be called with the history state *before* the event enters
    it; credits arrive later (whenever matches complete or guards fire) through
    ``credit``. Optionally records each event's arrival index inside the newest
    window (``position``), which the type/position baseline trains on.
    """

    def __init__(
        self,
        schema: StreamSchema,
        pattern_weights: dict[str, float] | None = None,
        limit: int | None = None,
    ):
        self._schema = schema
        self._weights = dict(pattern_weights or {})
        self._limit = limit
        self._rows: list[tuple[int, int, tuple[int, ...], tuple[int, ...], int]] = []
        self._credits: dict[int, list[float]] = {}
        self._indexed: set[int] = set()

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def full(self) -> bool:
        return self._limit is not None and len(self._rows) >= self._limit

    def observe(self, e: Event, count_bins: tuple[int, ...], position: int = 0) -> None:
        if self.full:
            return
        self._rows.append((e.seq, e.type_id, count_bins, self._schema.bin_attrs(e.attrs), position))
        self._indexed.add(e.seq)

    def credit(self, result: ProcessResult) -> None:
        for cev in result.complex_events:
            for seq in cev.seqs:
                if seq in self._indexed:
                    self._credits.setdefault(seq, []).append(cev.weight)
        for note in result.notifications:
            if note.kind == ABANDON_NEGATION and note.cause_seq in self._indexed:
                w = self._weights.get(note.pattern_id, 1.0)
                self._credits.setdefault(note.cause_seq, []).append(w)

    def finalize(self) -> list[Observation]:
        return [
            Observation(seq, tid, cb, ab, tuple(self._credits.get(seq, ())))
            for seq, tid, cb, ab, _pos in self._rows
        ]

    def finalize_positions(self) -> list[tuple[int, int, tuple[float, ...]]]:
        """(type_id, position, credits) rows for position-based baselines."""
        return [
            (tid, pos, tuple(self._credits.get(seq, ())))
            for seq, tid, _cb, _ab, pos in self._rows
        ]

    def drop_before(self, min_seq: int) -> None:
        """Forget rows older than ``min_seq`` (sliding retraining buffer)."""
        self._rows = [r for r in self._rows if r[0] >= min_seq]
        self._indexed = {r[0] for r in self._rows}
        self._credits = {s: c for s, c in self._credits.items() if s in self._indexed}


def aggregate_observations(observations: Iterable[Observation]) -> dict[ObsKey, tuple[float, int]]:
    """Group identical feature combinations: credit mass M and occurrence count O."""
    agg: dict[ObsKey, list[float]] = {}
    for ob in observations:
        cell = agg.get(ob.key)
        if cell is None:
            cell = [0.0, 0]
            agg[ob.key] = cell
        cell[0] += sum(ob.credits)
        cell[1] += 1
    return {k: (m, int(o)) for k, (m, o) in agg.items()}


def utility_map(agg: dict[ObsKey, tuple[float, int]]) -> dict[ObsKey, float]:
    """Utility per group: credit mass over occurrences (M / O)."""
    return {k: m / o for k, (m, o) in agg.items()}


def dump_aggregates_csv(
    path: str,
    agg: dict[ObsKey, tuple[float, int]],
    schema: StreamSchema,
) -> None:
    utilities = utility_map(agg)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = (
            ["type"]
            + [f"count_bin_{t.name}" for t in schema.types]
            + [f"bin_{a.name}" for a in schema.attributes]
            + ["M", "O", "U"]
        )
        writer.writerow(header)
        for key in sorted(agg):
            tid, cbins, abins = key
            m, o = agg[key]
            writer.writerow(
                [schema.types[tid].name, *cbins, *abins, repr(m), o, repr(utilities[key])]
            )
