"""Experiment harness: trains shedders on a sub-capacity stream, replays an
overloaded stream through a simulated single-server queue, and reports the
quality-of-results degradation against the unshed ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import ExperimentConfig
from .engine import CepEngine
from .events import Event, EventStream, StreamSchema, read_stream
from .models import (
    FeatureEncoder,
    MlUtilityModel,
    UtilityTable,
    UtilityTreeRegressor,
    UtilityForestRegressor,
)
from .patterns import Pattern
from .shedding import (
    LoadMonitor,
    ModelShedder,
    MonitorConfig,
    NoShedder,
    PositionShedder,
    SamplingShedder,
    Shedder,
    TableShedder,
    UtilityHistogram,
)
from .stats import (
    ObservationCollector,
    ObsKey,
    TypeHistory,
    aggregate_observations,
    utility_map,
)
from .synthetic import SyntheticSpec, UniformIntAttr, generate_synthetic
from .zobrist import ZobristKeys

REPORT_SCHEMA_ID = "qor-report/v1"
COMPARISON_SCHEMA_ID = "comparison/v1"

DetectionId = tuple


@dataclass
class CostModel:
    """Per-event processing cost in simulated seconds; service rate is 1/base."""

    base: float
    per_type: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.base <= 0 or any(c <= 0 for c in self.per_type.values()):
            raise ValueError("processing costs must be positive")

    def cost(self, e: Event) -> float:
        return self.per_type.get(e.type_id, self.base)

    @property
    def service_rate(self) -> float:
        return 1.0 / self.base


def ground_truth(stream: Iterable[Event], patterns: Sequence[Pattern], kills_all: bool = True) -> set[DetectionId]:
    """Detection identities of the unshed engine run over the whole stream."""
    engine = CepEngine(patterns, kills_all)
    out: set[DetectionId] = set()
    for e in stream:
        for cev in engine.process(e).complex_events:
            out.add(cev.identity)
    engine.finish()
    return out


@dataclass
class TrainingResult:
    """Everything learnable from the training phase, for every strategy."""

    schema: StreamSchema
    agg: dict[ObsKey, tuple[float, int]]
    utilities: dict[ObsKey, float]
    histogram: UtilityHistogram | None
    position_agg: dict[tuple[int, int], tuple[float, int]]
    type_shares: list[float]
    type_scores: list[float]
    n_observations: int
    observations: list = field(default_factory=list)


def run_training(
    stream: Iterable[Event],
    patterns: Sequence[Pattern],
    schema: StreamSchema,
    history_length: int,
    count_bin_size: int = 1,
    utility_quantum: float = 1e-3,
    max_observations: int | None = None,
    kills_all: bool = True,
    keep_observations: bool = False,
) -> TrainingResult:
    """One unshed pass gathering the statistics every shedder trains on."""
    engine = CepEngine(patterns, kills_all)
    history = TypeHistory(schema.n_types, history_length, count_bin_size)
    weights = {p.id: p.weight for p in patterns}
    collector = ObservationCollector(schema, weights, limit=max_observations)
    slide = patterns[0].slide
    window_k = -1
    counter = 0
    type_counts = [0] * schema.n_types
    n_events = 0
    for e in stream:
        k = int(math.floor(e.ts / slide))
        if k != window_k:
            window_k = k
            counter = 0
        collector.observe(e, history.count_bins, position=counter)
        counter += 1
        history.push(e.type_id)
        collector.credit(engine.process(e))
        type_counts[e.type_id] += 1
        n_events += 1
    collector.credit(engine.finish())

    observations = collector.finalize()
    agg = aggregate_observations(observations)
    utilities = utility_map(agg)
    histogram = (
        UtilityHistogram.from_stats(utilities, agg, utility_quantum) if agg else None
    )
    return _finish_training(
        schema,
        patterns,
        collector,
        agg,
        utilities,
        histogram,
        type_counts,
        n_events,
        utility_quantum,
        observations if keep_observations else [],
    )


def _finish_training(
    schema,
    patterns,
    collector,
    agg,
    utilities,
    histogram,
    type_counts,
    n_events,
    quantum,
    observations,
) -> TrainingResult:
    n_types = schema.n_types
    pos_rows = collector.finalize_positions()
    pos_agg: dict[tuple[int, int], list] = {}
    # position rows are per raw index; pooling into bins happens at build time
    for tid, pos, credits in pos_rows:
        cell = pos_agg.setdefault((tid, pos), [0.0, 0])
        cell[0] += sum(credits)
        cell[1] += 1
    shares = [c / n_events if n_events else 0.0 for c in type_counts]
    reps = [0.0] * n_types
    for p in patterns:
        for branch in p.branches:
            for el in branch.elements:
                for t in el.type_ids:
                    reps[t] += p.weight
    scores = [reps[t] * shares[t] for t in range(n_types)]
    return TrainingResult(
        schema=schema,
        agg=agg,
        utilities=utilities,
        histogram=histogram,
        position_agg={k: (m, o) for k, (m, o) in pos_agg.items()},
        type_shares=shares,
        type_scores=scores,
        n_observations=len(collector),
        observations=observations,
    )


def build_position_stats(
    training: TrainingResult, position_bin_width: int, quantum: float
) -> tuple[dict[tuple[int, int], float], list[float], UtilityHistogram]:
    """Pool raw position rows into (type, position bin) utilities plus defaults."""
    binned: dict[tuple[int, int], list] = {}
    per_type_mass = [0.0] * training.schema.n_types
    per_type_occ = [0] * training.schema.n_types
    for (tid, pos), (m, o) in training.position_agg.items():
        cell = binned.setdefault((tid, pos // position_bin_width), [0.0, 0])
        cell[0] += m
        cell[1] += o
        per_type_mass[tid] += m
        per_type_occ[tid] += o
    utilities = {k: m / o for k, (m, o) in binned.items()}
    total_mass = sum(per_type_mass)
    total_occ = sum(per_type_occ)
    global_mean = total_mass / total_occ if total_occ else 0.0
    defaults = [
        per_type_mass[t] / per_type_occ[t] if per_type_occ[t] else global_mean
        for t in range(training.schema.n_types)
    ]
    histogram = UtilityHistogram.from_pairs(
        [(u, binned[k][1]) for k, u in utilities.items()], quantum
    )
    return utilities, defaults, histogram


def fit_ml_model(
    training: TrainingResult,
    kind: str,
    max_depth: int | None,
    min_samples_split: int,
    n_trees: int,
    forest_seed: int,
) -> MlUtilityModel:
    encoder = FeatureEncoder(training.schema.n_types, training.schema.n_attributes)
    keys = sorted(training.agg)
    X = encoder.matrix(keys)
    y = np.array([training.utilities[k] for k in keys])
    w = np.array([float(training.agg[k][1]) for k in keys])
    if kind == "gspice-t":
        est = UtilityTreeRegressor(max_depth=max_depth, min_samples_split=min_samples_split)
        est.fit(X, y, sample_weight=w)
    elif kind == "gspice-f":
        est = UtilityForestRegressor(
            n_estimators=n_trees,
            max_depth=max_depth,
            min_samples_split=min_samples_split,
            random_state=forest_seed,
        )
        est.fit(X, y, sample_weight=w)
    else:
        raise ValueError(f"not an ML shedder kind: {kind!r}")
    return MlUtilityModel(encoder, est)


def model_histogram(training: TrainingResult, model: MlUtilityModel, quantum: float) -> UtilityHistogram:
    """Occurrence histogram over the model's own predicted utilities.

    Threshold selection must see the utility distribution the drop path will
    consult; a fitted model's predictions are smoothed relative to the raw
    per-group utilities, so the raw histogram would mis-map rho to thresholds.
    """
    pairs = [
        (model.utility_for(t, c, a), o) for (t, c, a), (_, o) in sorted(training.agg.items())
    ]
    return UtilityHistogram.from_pairs(pairs, quantum)


def build_shedder(cfg: ExperimentConfig, training: TrainingResult | None, patterns: Sequence[Pattern]) -> Shedder:
    """Assemble the configured strategy from training artifacts."""
    kind = cfg.shedder.kind
    if kind == "none":
        return NoShedder()
    if training is None:
        raise ValueError(f"shedder {kind!r} needs a training phase or a model file")
    monitor = LoadMonitor(_monitor_config(cfg, patterns))
    schema = training.schema
    sh = cfg.shedder
    if kind in ("gspice-h", "gspice-t", "gspice-f"):
        if training.histogram is None:
            raise ValueError("no training observations: cannot build a utility histogram")
        if kind == "gspice-h":
            keys = ZobristKeys(
                schema.n_types,
                TypeHistory.max_count_bin(sh.history_length, sh.count_bin_size),
                [a.n_bins for a in schema.attributes],
                cfg.seeds.zobrist,
            )
            table = UtilityTable.from_stats(
                training.agg, training.utilities, keys, schema.n_types, sh.default_utility
            )
            history = TypeHistory(schema.n_types, sh.history_length, sh.count_bin_size, keys=keys)
            return TableShedder(monitor, training.histogram, table, history, schema)
        model = fit_ml_model(
            training, kind, sh.tree_max_depth, sh.tree_min_samples_split, sh.forest_trees, cfg.seeds.forest
        )
        hist = model_histogram(training, model, sh.utility_quantum)
        history = TypeHistory(schema.n_types, sh.history_length, sh.count_bin_size)
        return ModelShedder(monitor, hist, model, history, schema, kind)
    if kind == "espice":
        utilities, defaults, hist = build_position_stats(training, sh.position_bin_width, sh.utility_quantum)
        return PositionShedder(monitor, hist, utilities, defaults, patterns[0].slide, sh.position_bin_width)
    if kind == "bl":
        return SamplingShedder(monitor, training.type_shares, training.type_scores, cfg.seeds.sampling)
    raise ValueError(f"unknown shedder kind {kind!r}")


def _monitor_config(cfg: ExperimentConfig, patterns: Sequence[Pattern]) -> MonitorConfig:
    rt = cfg.runtime
    interval = rt.drop_interval if rt.drop_interval is not None else patterns[0].slide
    return MonitorConfig(
        latency_bound=rt.latency_bound,
        safety_fraction=rt.safety_fraction,
        release_fraction=rt.release_fraction,
        drop_interval=interval,
        ewma_alpha=rt.ewma_alpha,
        rho_max=rt.rho_max,
        rho_override=rt.rho_override,
    )


@dataclass
class ReplayOutcome:
    detections: set[DetectionId]
    n_events: int
    n_dropped: int
    n_dropped_steady: int
    n_steady: int
    latencies_p50: float
    latencies_p99: float
    latency_max: float
    lb_violations: int
    queue_latency_steady_mean: float

    @property
    def drop_ratio(self) -> float:
        return self.n_dropped / self.n_events if self.n_events else 0.0

    @property
    def steady_drop_ratio(self) -> float:
        return self.n_dropped_steady / self.n_steady if self.n_steady else 0.0


def replay_overload(
    stream: EventStream,
    patterns: Sequence[Pattern],
    shedder: Shedder,
    cost_model: CostModel,
    latency_bound: float,
    warmup_fraction: float = 0.25,
    kills_all: bool = True,
    retrain: "RetrainDriver | None" = None,
) -> ReplayOutcome:
    """Replay through a FIFO single-server queue in simulated time.

    Every input event is dequeued exactly once: the shedder sees it (and its
    queueing latency) first; only admitted events consume service time and
    reach the engine. Event timestamps, not dequeue times, drive windows.
    """
    engine = CepEngine(patterns, kills_all)
    detections: set[DetectionId] = set()
    arrivals = stream.ts
    n = len(stream)
    t_free = 0.0
    dropped = 0
    dropped_steady = 0
    n_steady = 0
    lq_steady_sum = 0.0
    violations = 0
    latencies: list[float] = []
    ts0 = float(arrivals[0]) if n else 0.0
    cutoff = ts0 + warmup_fraction * (float(arrivals[-1]) - ts0) if n else 0.0
    for i, e in enumerate(stream):
        dequeue_at = e.ts if e.ts > t_free else t_free
        queue_latency = dequeue_at - e.ts
        queue_len = int(np.searchsorted(arrivals, dequeue_at, side="right")) - (i + 1)
        steady = e.ts >= cutoff
        if steady:
            n_steady += 1
            lq_steady_sum += queue_latency
        if shedder.on_dequeue(e, queue_latency, dequeue_at, queue_len):
            dropped += 1
            if steady:
                dropped_steady += 1
            if retrain is not None:
                retrain.on_dropped(e)
            continue
        cost = cost_model.cost(e)
        t_free = dequeue_at + cost
        shedder.note_service(cost)
        latency = queue_latency + cost
        latencies.append(latency)
        if latency > latency_bound:
            violations += 1
        result = engine.process(e)
        for cev in result.complex_events:
            detections.add(cev.identity)
        if retrain is not None:
            retrain.on_processed(e, result, shedder)
    final = engine.finish()
    if retrain is not None:
        retrain.on_finish(final)
    lat = np.array(latencies) if latencies else np.zeros(1)
    return ReplayOutcome(
        detections=detections,
        n_events=n,
        n_dropped=dropped,
        n_dropped_steady=dropped_steady,
        n_steady=n_steady,
        latencies_p50=float(np.percentile(lat, 50)),
        latencies_p99=float(np.percentile(lat, 99)),
        latency_max=float(lat.max()),
        lb_violations=violations,
        queue_latency_steady_mean=(lq_steady_sum / n_steady) if n_steady else 0.0,
    )


def replay_wall_clock(
    stream: EventStream,
    patterns: Sequence[Pattern],
    shedder: Shedder,
    cost_model: CostModel,
    latency_bound: float,
    time_scale: float = 1.0,
    queue_capacity: int = 10_000,
) -> ReplayOutcome:
    """Demonstration replay against the real clock.

    A producer thread feeds events into a bounded FIFO queue on their (scaled)
    arrival schedule; the consumer thread runs the shedder and engine, burning
    each admitted event's cost as real sleep time. Results are inherently
    non-deterministic; the simulated-time replay is the measurement path.
    """
    import queue as queue_mod
    import threading
    import time as time_mod

    engine = CepEngine(patterns)
    fifo: queue_mod.Queue = queue_mod.Queue(maxsize=queue_capacity)
    start = time_mod.monotonic()

    def produce() -> None:
        for e in stream:
            wait = start + e.ts * time_scale - time_mod.monotonic()
            if wait > 0:
                time_mod.sleep(wait)
            fifo.put((e, time_mod.monotonic()))
        fifo.put(None)

    producer = threading.Thread(target=produce, daemon=True)
    producer.start()
    detections: set[DetectionId] = set()
    latencies: list[float] = []
    dropped = 0
    violations = 0
    n = 0
    lq_sum = 0.0
    while True:
        item = fifo.get()
        if item is None:
            break
        e, enqueued_at = item
        now = time_mod.monotonic()
        queue_latency = (now - enqueued_at) / time_scale
        n += 1
        lq_sum += queue_latency
        if shedder.on_dequeue(e, queue_latency, now - start, fifo.qsize()):
            dropped += 1
            continue
        cost = cost_model.cost(e)
        time_mod.sleep(cost * time_scale)
        shedder.note_service(cost)
        latency = queue_latency + cost
        latencies.append(latency)
        if latency > latency_bound:
            violations += 1
        for cev in engine.process(e).complex_events:
            detections.add(cev.identity)
    engine.finish()
    producer.join()
    lat = np.array(latencies) if latencies else np.zeros(1)
    return ReplayOutcome(
        detections=detections,
        n_events=n,
        n_dropped=dropped,
        n_dropped_steady=dropped,
        n_steady=n,
        latencies_p50=float(np.percentile(lat, 50)),
        latencies_p99=float(np.percentile(lat, 99)),
        latency_max=float(lat.max()),
        lb_violations=violations,
        queue_latency_steady_mean=(lq_sum / n) if n else 0.0,
    )


class RetrainDriver:
    """Periodic model refresh from processed (admitted) events.

    Dropped events never reach the engine, so their contributions are unknown;
    retraining therefore sees only the admitted substream, a known bias of
    operating-phase statistics. Only the keyed-table and model strategies
    support swapping; baselines stay static.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        schema: StreamSchema,
        patterns: Sequence[Pattern],
        interval: int,
        buffer_size: int,
    ):
        self._cfg = cfg
        self._schema = schema
        self._patterns = list(patterns)
        self._interval = interval
        self._buffer = buffer_size
        weights = {p.id: p.weight for p in patterns}
        self._collector = ObservationCollector(schema, weights)
        self._since = 0
        self.swaps = 0

    def on_dropped(self, e: Event) -> None:
        pass

    def on_processed(self, e: Event, result, shedder: Shedder) -> None:
        count_bins = getattr(shedder, "last_count_bins", None)
        if count_bins is None:
            return
        # the shedder snapshots its history state before pushing the event, so
        # retraining observations use the same exclude-self features as training
        self._collector.observe(e, count_bins)
        self._collector.credit(result)
        self._since += 1
        if self._since >= self._interval:
            self._since = 0
            self._refresh(shedder)

    def on_finish(self, final_result) -> None:
        self._collector.credit(final_result)

    def _refresh(self, shedder: Shedder) -> None:
        observations = self._collector.finalize()
        if len(observations) > self._buffer:
            observations = observations[-self._buffer :]
            self._collector.drop_before(observations[0].seq)
        agg = aggregate_observations(observations)
        if not agg:
            return
        utilities = utility_map(agg)
        histogram = UtilityHistogram.from_stats(utilities, agg, self._cfg.shedder.utility_quantum)
        if isinstance(shedder, TableShedder):
            table = UtilityTable.from_stats(
                agg, utilities, shedder.table.keys, self._schema.n_types, self._cfg.shedder.default_utility
            )
            shedder.swap_model(table, histogram)
            self.swaps += 1
        elif isinstance(shedder, ModelShedder):
            training = TrainingResult(
                schema=self._schema,
                agg=agg,
                utilities=utilities,
                histogram=histogram,
                position_agg={},
                type_shares=[],
                type_scores=[],
                n_observations=len(observations),
            )
            sh = self._cfg.shedder
            model = fit_ml_model(
                training,
                shedder.kind,
                sh.tree_max_depth,
                sh.tree_min_samples_split,
                sh.forest_trees,
                self._cfg.seeds.forest + self.swaps + 1,
            )
            shedder.swap_model(model, model_histogram(training, model, sh.utility_quantum))
            self.swaps += 1


@dataclass
class QoRReport:
    """Quality-of-results and latency summary of one overload run."""

    identity: dict
    shedder: str
    per_pattern: dict[str, dict]
    weighted_objective: float
    drop_ratio: float
    steady_drop_ratio: float
    latency_p50: float
    latency_p99: float
    latency_max: float
    lb_violations: int
    queue_latency_steady_mean: float
    events_total: int
    events_dropped: int
    schema_id: str = REPORT_SCHEMA_ID

    def to_dict(self) -> dict:
        return {
            "schema": self.schema_id,
            "identity": self.identity,
            "shedder": self.shedder,
            "per_pattern": self.per_pattern,
            "weighted_objective": self.weighted_objective,
            "drop_ratio": self.drop_ratio,
            "steady_drop_ratio": self.steady_drop_ratio,
            "latency": {
                "p50": self.latency_p50,
                "p99": self.latency_p99,
                "max": self.latency_max,
            },
            "lb_violations": self.lb_violations,
            "queue_latency_steady_mean": self.queue_latency_steady_mean,
            "events": {"total": self.events_total, "dropped": self.events_dropped},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "QoRReport":
        if doc.get("schema") != REPORT_SCHEMA_ID:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        return cls(
            identity=doc["identity"],
            shedder=doc["shedder"],
            per_pattern=doc["per_pattern"],
            weighted_objective=doc["weighted_objective"],
            drop_ratio=doc["drop_ratio"],
            steady_drop_ratio=doc["steady_drop_ratio"],
            latency_p50=doc["latency"]["p50"],
            latency_p99=doc["latency"]["p99"],
            latency_max=doc["latency"]["max"],
            lb_violations=doc["lb_violations"],
            queue_latency_steady_mean=doc["queue_latency_steady_mean"],
            events_total=doc["events"]["total"],
            events_dropped=doc["events"]["dropped"],
        )

    @classmethod
    def from_json(cls, text: str) -> "QoRReport":
        return cls.from_dict(json.loads(text))


def build_report(
    cfg: ExperimentConfig,
    patterns: Sequence[Pattern],
    truth: set[DetectionId],
    outcome: ReplayOutcome,
) -> QoRReport:
    per_pattern: dict[str, dict] = {}
    objective = 0.0
    weights = {p.id: p.weight for p in patterns}
    for p in patterns:
        g = {d for d in truth if d[0] == p.id}
        d = {x for x in outcome.detections if x[0] == p.id}
        fn = len(g - d)
        fp = len(d - g)
        objective += weights[p.id] * (fn + fp)
        per_pattern[p.id] = {
            "ground_truth": len(g),
            "detected": len(d),
            "false_negatives": fn,
            "false_positives": fp,
            "fn_pct": (100.0 * fn / len(g)) if g else (0.0 if fn == 0 else None),
            "fp_pct": (100.0 * fp / len(g)) if g else (0.0 if fp == 0 else None),
        }
    return QoRReport(
        identity=cfg.identity(),
        shedder=cfg.shedder.kind,
        per_pattern=per_pattern,
        weighted_objective=objective,
        drop_ratio=outcome.drop_ratio,
        steady_drop_ratio=outcome.steady_drop_ratio,
        latency_p50=outcome.latencies_p50,
        latency_p99=outcome.latencies_p99,
        latency_max=outcome.latency_max,
        lb_violations=outcome.lb_violations,
        queue_latency_steady_mean=outcome.queue_latency_steady_mean,
        events_total=outcome.n_events,
        events_dropped=outcome.n_dropped,
    )


def build_streams(cfg: ExperimentConfig, schema: StreamSchema) -> tuple[EventStream, EventStream]:
    """Training and measurement streams, retimed to their target arrival rates.

    Synthetic streams use independent seeds per phase; file streams split by
    event count, with the measurement segment re-anchored to t=0.
    """
    mu = 1.0 / cfg.runtime.cost
    if cfg.stream.kind == "synthetic":
        dists = [UniformIntAttr(a.low, a.high) for a in cfg.stream.attributes]
        spec_train = SyntheticSpec(
            schema,
            cfg.stream.mean_interarrival,
            dists,
            count=cfg.stream.train_events,
            seed=cfg.seeds.stream_train,
        )
        spec_run = SyntheticSpec(
            schema,
            cfg.stream.mean_interarrival,
            dists,
            count=cfg.stream.run_events,
            seed=cfg.seeds.stream_run,
        )
        natural = spec_train.total_rate
        train = generate_synthetic(spec_train).retimed(cfg.runtime.train_rate * mu / natural)
        run = generate_synthetic(spec_run).retimed(cfg.runtime.rate * mu / natural)
        return train, run
    full = read_stream(cfg.stream.path, schema)
    n_train = min(cfg.stream.train_events, len(full))
    n_run = min(cfg.stream.run_events, len(full) - n_train)
    train = full[:n_train].shifted_to_zero()
    run = full[n_train : n_train + n_run].shifted_to_zero()
    train_rate = train.arrival_rate()
    run_rate = run.arrival_rate()
    if train_rate > 0:
        train = train.retimed(cfg.runtime.train_rate * mu / train_rate)
    if run_rate > 0:
        run = run.retimed(cfg.runtime.rate * mu / run_rate)
    return train, run


def trained_bundle(cfg: ExperimentConfig, training: TrainingResult, patterns: Sequence[Pattern]) -> dict:
    """Serializable model document for the configured strategy."""
    from .models import MODEL_SCHEMA_ID

    kind = cfg.shedder.kind
    sh = cfg.shedder
    schema = training.schema
    doc: dict = {"schema": MODEL_SCHEMA_ID, "kind": kind, "trained_on": cfg.identity()}
    if kind == "none":
        return doc
    if kind in ("gspice-h", "gspice-t", "gspice-f"):
        if training.histogram is None:
            raise ValueError("no training observations: cannot build a model")
        doc["histogram"] = training.histogram.to_payload()
        if kind == "gspice-h":
            keys = ZobristKeys(
                schema.n_types,
                TypeHistory.max_count_bin(sh.history_length, sh.count_bin_size),
                [a.n_bins for a in schema.attributes],
                cfg.seeds.zobrist,
            )
            table = UtilityTable.from_stats(
                training.agg, training.utilities, keys, schema.n_types, sh.default_utility
            )
            doc["model"] = table.to_payload()
        else:
            model = fit_ml_model(
                training, kind, sh.tree_max_depth, sh.tree_min_samples_split, sh.forest_trees, cfg.seeds.forest
            )
            doc["model"] = model.to_payload()
            doc["histogram"] = model_histogram(training, model, sh.utility_quantum).to_payload()
    elif kind == "espice":
        utilities, defaults, hist = build_position_stats(training, sh.position_bin_width, sh.utility_quantum)
        doc["histogram"] = hist.to_payload()
        doc["model"] = {
            "utilities": {f"{t}:{b}": u for (t, b), u in sorted(utilities.items())},
            "defaults": defaults,
            "position_bin_width": sh.position_bin_width,
            "slide": patterns[0].slide,
        }
    elif kind == "bl":
        doc["model"] = {"shares": training.type_shares, "scores": training.type_scores}
    return doc


def shedder_from_bundle(cfg: ExperimentConfig, doc: dict, patterns: Sequence[Pattern]) -> Shedder:
    """Rebuild a shedder from a saved model document."""
    kind = doc["kind"]
    if kind != cfg.shedder.kind:
        raise ValueError(f"model file holds {kind!r} but the config asks for {cfg.shedder.kind!r}")
    if kind == "none":
        return NoShedder()
    schema = cfg.build_schema()
    monitor = LoadMonitor(_monitor_config(cfg, patterns))
    sh = cfg.shedder
    if kind == "gspice-h":
        table = UtilityTable.from_payload(doc["model"])
        hist = UtilityHistogram.from_payload(doc["histogram"])
        history = TypeHistory(schema.n_types, sh.history_length, sh.count_bin_size, keys=table.keys)
        return TableShedder(monitor, hist, table, history, schema)
    if kind in ("gspice-t", "gspice-f"):
        model = MlUtilityModel.from_payload(doc["model"])
        hist = UtilityHistogram.from_payload(doc["histogram"])
        history = TypeHistory(schema.n_types, sh.history_length, sh.count_bin_size)
        return ModelShedder(monitor, hist, model, history, schema, kind)
    if kind == "espice":
        m = doc["model"]
        utilities = {}
        for key, u in m["utilities"].items():
            t, b = key.split(":")
            utilities[(int(t), int(b))] = float(u)
        hist = UtilityHistogram.from_payload(doc["histogram"])
        return PositionShedder(
            monitor, hist, utilities, [float(d) for d in m["defaults"]],
            float(m["slide"]), int(m["position_bin_width"]),
        )
    if kind == "bl":
        m = doc["model"]
        return SamplingShedder(monitor, m["shares"], m["scores"], cfg.seeds.sampling)
    raise ValueError(f"unknown shedder kind {kind!r}")


def run_experiment(
    cfg: ExperimentConfig,
    training: TrainingResult | None = None,
    shedder: Shedder | None = None,
) -> QoRReport:
    """Train (unless given a prebuilt training result or shedder), replay, report."""
    schema = cfg.build_schema()
    patterns = cfg.build_patterns(schema)
    kills_all = all(q.negation_kills_all for q in cfg.queries)
    train_stream, run_stream = build_streams(cfg, schema)
    if shedder is None and training is None and cfg.shedder.kind != "none":
        training = run_training(
            train_stream,
            patterns,
            schema,
            history_length=cfg.shedder.history_length,
            count_bin_size=cfg.shedder.count_bin_size,
            utility_quantum=cfg.shedder.utility_quantum,
            max_observations=cfg.shedder.max_observations,
            kills_all=kills_all,
        )
    if shedder is None:
        shedder = build_shedder(cfg, training, patterns)
    truth = ground_truth(run_stream, patterns, kills_all)
    cost_model = CostModel(
        cfg.runtime.cost,
        {schema.type_by_name(n).id: c for n, c in cfg.runtime.cost_per_type.items()},
    )
    retrain = None
    if cfg.shedder.retrain_interval is not None and cfg.shedder.kind in ("gspice-h", "gspice-t", "gspice-f"):
        retrain = RetrainDriver(
            cfg, schema, patterns, cfg.shedder.retrain_interval, cfg.shedder.retrain_buffer
        )
    outcome = replay_overload(
        run_stream,
        patterns,
        shedder,
        cost_model,
        cfg.runtime.latency_bound,
        cfg.runtime.warmup_fraction,
        kills_all,
        retrain,
    )
    return build_report(cfg, patterns, truth, outcome)


def compare_reports(reports: Sequence[QoRReport]) -> dict:
    """Side-by-side table of reports from the same experiment identity."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    base = reports[0].identity
    for r in reports[1:]:
        if r.identity != base:
            raise ValueError("reports come from different experiments (identity mismatch)")
    pattern_ids = sorted(reports[0].per_pattern)
    rows = []
    for r in reports:
        row: dict[str, object] = {"shedder": r.shedder}
        for pid in pattern_ids:
            pp = r.per_pattern[pid]
            row[f"fn_pct_{pid}"] = pp["fn_pct"]
            row[f"fp_pct_{pid}"] = pp["fp_pct"]
        row["weighted_objective"] = r.weighted_objective
        row["drop_ratio"] = r.drop_ratio
        row["steady_drop_ratio"] = r.steady_drop_ratio
        row["latency_p50"] = r.latency_p50
        row["latency_p99"] = r.latency_p99
        row["latency_max"] = r.latency_max
        row["lb_violations"] = r.lb_violations
        rows.append(row)
    return {"schema": COMPARISON_SCHEMA_ID, "experiment": base, "rows": rows}


def comparison_csv(comparison: dict) -> str:
    rows = comparison["rows"]
    columns = list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join("" if row[c] is None else str(row[c]) for c in columns))
    return "\n".join(lines) + "\n"
