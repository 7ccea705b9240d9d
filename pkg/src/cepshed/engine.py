"""Windowed pattern matching engine.

Semantics: time-based sliding windows anchored at t=0; inside each window every
pattern is matched greedily. An arriving event kills the guard-matched partial
matches (negation), then extends at most one partial match per pattern and
window (the oldest whose pending element it satisfies), then opens a new
partial match per branch whose first element it matches. A completed match
consumes its first bound event within that window; all other bound events stay
reusable.
"""

from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .events import Event
from .patterns import Branch, Pattern

OPEN = "open"
EXTEND = "extend"
COMPLETE = "complete"
ABANDON_NEGATION = "abandon_negation"
ABANDON_WINDOW_CLOSE = "abandon_window_close"


@dataclass(frozen=True, slots=True)
class ComplexEvent:
    pattern_id: str
    window_id: int
    seqs: tuple[int, ...]
    weight: float
    branch: int = 0

    @property
    def identity(self) -> tuple:
        return (self.pattern_id, self.window_id, self.seqs)


@dataclass(frozen=True, slots=True)
class Notification:
    kind: str
    pattern_id: str
    window_id: int
    pm_id: int
    seqs: tuple[int, ...] = ()
    cause_seq: int | None = None


@dataclass(frozen=True, slots=True)
class Window:
    window_id: int
    start: float
    end: float


@dataclass(slots=True)
class ProcessResult:
    complex_events: list[ComplexEvent] = field(default_factory=list)
    notifications: list[Notification] = field(default_factory=list)


class _PM:
    """A partial match: per-element bound events plus the matching cursor."""

    __slots__ = ("pid", "branch_idx", "state", "kleene_idx", "bindings", "alive", "bucket_types")

    def __init__(self, pid: int, branch_idx: int, n_elements: int):
        self.pid = pid
        self.branch_idx = branch_idx
        self.state = 0
        self.kleene_idx: int | None = None
        self.bindings: list[list[Event]] = [[] for _ in range(n_elements)]
        self.alive = True
        self.bucket_types: set[int] = set()

    def seqs(self) -> tuple[int, ...]:
        return tuple(ev.seq for bound in self.bindings for ev in bound)


class _WindowState:
    __slots__ = ("window_id", "start", "end", "buckets", "pms", "consumed")

    def __init__(self, window_id: int, start: float, end: float):
        self.window_id = window_id
        self.start = start
        self.end = end
        self.buckets: dict[int, list[_PM]] = {}
        self.pms: list[_PM] = []
        self.consumed: set[int] = set()

    def register(self, pm: _PM, type_ids: Iterable[int]) -> None:
        for t in type_ids:
            if t not in pm.bucket_types:
                pm.bucket_types.add(t)
                bucket = self.buckets.get(t)
                if bucket is None:
                    self.buckets[t] = [pm]
                elif bucket and bucket[-1].pid < pm.pid:
                    bucket.append(pm)
                else:
                    insort(bucket, pm, key=lambda p: p.pid)

    def view(self) -> Window:
        return Window(self.window_id, self.start, self.end)


class _PatternRunner:
    """All window states and matching logic for one pattern."""

    def __init__(self, pattern: Pattern, kills_all: bool, pid_alloc):
        self.pattern = pattern
        self.kills_all = kills_all
        self._next_pid = pid_alloc
        self.windows: dict[int, _WindowState] = {}
        self._next_window = 0

    def advance_time(self, ts: float, opened: list[Window], notifications: list[Notification]) -> None:
        slide = self.pattern.slide
        k_max = int(math.floor(ts / slide))
        while self._next_window <= k_max:
            k = self._next_window
            start = k * slide
            ws = _WindowState(k, start, start + self.pattern.window_size)
            self.windows[k] = ws
            opened.append(ws.view())
            self._next_window += 1
        expired = [k for k, ws in self.windows.items() if ws.end <= ts]
        for k in expired:
            ws = self.windows.pop(k)
            for pm in ws.pms:
                if pm.alive:
                    pm.alive = False
                    notifications.append(
                        Notification(ABANDON_WINDOW_CLOSE, self.pattern.id, k, pm.pid, pm.seqs())
                    )

    def close_all(self, notifications: list[Notification]) -> None:
        for k, ws in list(self.windows.items()):
            for pm in ws.pms:
                if pm.alive:
                    pm.alive = False
                    notifications.append(
                        Notification(ABANDON_WINDOW_CLOSE, self.pattern.id, k, pm.pid, pm.seqs())
                    )
        self.windows.clear()

    def process(self, e: Event, out: ProcessResult) -> None:
        for ws in self.windows.values():
            self._process_in_window(e, ws, out)

    # -- matching steps -------------------------------------------------

    def _process_in_window(self, e: Event, ws: _WindowState, out: ProcessResult) -> None:
        bucket = ws.buckets.get(e.type_id)
        if bucket:
            self._negation_pass(e, ws, bucket, out)
            self._extension_pass(e, ws, bucket, out)
        self._seed_pass(e, ws, out)

    def _negation_pass(self, e: Event, ws: _WindowState, bucket: list[_PM], out: ProcessResult) -> None:
        victims: list[_PM] = []
        for pm in bucket:
            if not pm.alive:
                continue
            branch = self.pattern.branches[pm.branch_idx]
            guards, _ = branch.route_from(pm.state)
            for g in guards:
                if branch.elements[g].accepts(e.type_id):
                    if branch.predicate.evaluate(pm.bindings, g, e) is not False:
                        victims.append(pm)
                        break
            if victims and not self.kills_all:
                break
        for pm in victims:
            pm.alive = False
            out.notifications.append(
                Notification(ABANDON_NEGATION, self.pattern.id, ws.window_id, pm.pid, pm.seqs(), e.seq)
            )

    def _extension_pass(self, e: Event, ws: _WindowState, bucket: list[_PM], out: ProcessResult) -> None:
        for pm in bucket:
            if not pm.alive:
                continue
            branch = self.pattern.branches[pm.branch_idx]
            if pm.kleene_idx is not None:
                k = pm.kleene_idx
                if branch.elements[k].accepts(e.type_id):
                    if branch.predicate.evaluate(pm.bindings, k, e) is not False:
                        pm.bindings[k].append(e)
                        out.notifications.append(
                            Notification(EXTEND, self.pattern.id, ws.window_id, pm.pid, (e.seq,))
                        )
                        return
            _, target = branch.route_from(pm.state)
            if target is None:
                continue
            element = branch.elements[target]
            if not element.accepts(e.type_id):
                continue
            if branch.predicate.evaluate(pm.bindings, target, e) is False:
                continue
            pm.bindings[target].append(e)
            out.notifications.append(
                Notification(EXTEND, self.pattern.id, ws.window_id, pm.pid, (e.seq,))
            )
            self._advance(pm, branch, target, ws, out)
            return

    def _seed_pass(self, e: Event, ws: _WindowState, out: ProcessResult) -> None:
        if e.seq in ws.consumed:
            return
        for branch_idx, branch in enumerate(self.pattern.branches):
            first = branch.elements[0]
            if not first.accepts(e.type_id):
                continue
            pm = _PM(next(self._next_pid), branch_idx, len(branch.elements))
            if branch.predicate.evaluate(pm.bindings, 0, e) is False:
                continue
            pm.bindings[0].append(e)
            ws.pms.append(pm)
            out.notifications.append(
                Notification(OPEN, self.pattern.id, ws.window_id, pm.pid, (e.seq,))
            )
            self._advance(pm, branch, 0, ws, out)

    def _advance(self, pm: _PM, branch: Branch, bound_idx: int, ws: _WindowState, out: ProcessResult) -> None:
        """Update the cursor after binding an event at ``bound_idx``; complete or re-register."""
        pm.kleene_idx = None  # binding any later element closes an open kleene
        element = branch.elements[bound_idx]
        if element.kleene:
            pm.kleene_idx = bound_idx
            pm.state = bound_idx + 1
        elif len(pm.bindings[bound_idx]) < element.count:
            pm.state = bound_idx  # multi-bind element still filling
        else:
            pm.state = bound_idx + 1
        if pm.state >= len(branch.elements):
            self._complete(pm, ws, out)
            return
        guards, target = branch.route_from(pm.state)
        wanted: set[int] = set()
        if pm.kleene_idx is not None:
            wanted.update(branch.elements[pm.kleene_idx].type_ids)
        for g in guards:
            wanted.update(branch.elements[g].type_ids)
        if target is not None:
            wanted.update(branch.elements[target].type_ids)
        ws.register(pm, wanted)

    def _complete(self, pm: _PM, ws: _WindowState, out: ProcessResult) -> None:
        pm.alive = False
        seqs = pm.seqs()
        ws.consumed.add(seqs[0])
        out.complex_events.append(
            ComplexEvent(self.pattern.id, ws.window_id, seqs, self.pattern.weight, pm.branch_idx)
        )
        out.notifications.append(
            Notification(COMPLETE, self.pattern.id, ws.window_id, pm.pid, seqs)
        )


class CepEngine:
    """Deterministic single-threaded matcher for a set of patterns.

    Feed events in timestamp order through :meth:`process`; call :meth:`finish`
    at end of stream to abandon the remaining open windows.
    """

    def __init__(self, patterns: Iterable[Pattern], negation_kills_all: bool = True):
        self._pid_counter = iter(range(1 << 62))
        self.patterns = list(patterns)
        if not self.patterns:
            raise ValueError("engine needs at least one pattern")
        self._runners = [_PatternRunner(p, negation_kills_all, self._pid_counter) for p in self.patterns]
        self._last_ts: float | None = None
        self._pending: list[Notification] = []

    def open_windows(self, ts: float) -> list[Window]:
        """Open every slide boundary up to ``ts``; close (and abandon) expired windows."""
        if ts < 0:
            raise ValueError("stream time starts at 0")
        opened: list[Window] = []
        for runner in self._runners:
            runner.advance_time(ts, opened, self._pending)
        return opened

    def process(self, e: Event) -> ProcessResult:
        if self._last_ts is not None and e.ts < self._last_ts:
            raise ValueError(f"event {e.seq} moves time backwards ({e.ts} < {self._last_ts})")
        self._last_ts = e.ts
        out = ProcessResult()
        self.open_windows(e.ts)
        if self._pending:
            out.notifications.extend(self._pending)
            self._pending.clear()
        for runner in self._runners:
            runner.process(e, out)
        return out

    def finish(self) -> ProcessResult:
        """Close all remaining windows, abandoning their live partial matches."""
        out = ProcessResult()
        if self._pending:
            out.notifications.extend(self._pending)
            self._pending.clear()
        for runner in self._runners:
            runner.close_all(out.notifications)
        return out

    def run(self, events: Iterable[Event]) -> Iterator[ProcessResult]:
        """Process a whole stream, ending with the finish() result."""
        for e in events:
            yield self.process(e)
        yield self.finish()


def contributions(
    results: Iterable[ProcessResult], patterns: Iterable[Pattern]
) -> dict[int, list[tuple[object, float]]]:
    """Per-event credit records: complex events an event is bound in (weight each)
    plus one credit, at the pattern's weight, per negated-element abandonment
    the event caused."""
    weights = {p.id: p.weight for p in patterns}
    credits: dict[int, list[tuple[object, float]]] = {}
    for res in results:
        for cev in res.complex_events:
            for seq in cev.seqs:
                credits.setdefault(seq, []).append((cev, cev.weight))
        for note in res.notifications:
            if note.kind == ABANDON_NEGATION and note.cause_seq is not None:
                credits.setdefault(note.cause_seq, []).append((note, weights[note.pattern_id]))
    return credits
