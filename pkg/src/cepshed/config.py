"""Experiment configuration: a single self-describing file, strictly validated.

Unknown keys are rejected with the full dotted path so typos surface early;
command-line overrides are applied to the raw mapping before validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import yaml

from .events import AttributeSpec, StreamSchema
from .patterns import Branch, Element, Pattern, PatternSyntaxError, Predicate

CONFIG_SCHEMA_ID = "experiment/v1"

SHEDDER_KINDS = ("gspice-h", "gspice-t", "gspice-f", "espice", "bl", "none")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


def _check_keys(mapping: dict, allowed: set[str], path: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}" if path else f"unknown key {key}")


def _req(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"missing required key {path}.{key}" if path else f"missing required key {key}")
    return mapping[key]


def _num(value, path: str, minimum=None, maximum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"{path} must be <= {maximum}, got {value}")
    return float(value)


def _int(value, path: str, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path} must be >= {minimum}, got {value}")
    return int(value)


def _str_choice(value, path: str, choices) -> str:
    if value not in choices:
        raise ConfigError(f"{path} must be one of {list(choices)}, got {value!r}")
    return value


@dataclass
class AttrCfg:
    name: str
    min_value: float
    max_value: float
    bin_size: float
    low: int
    high: int

    def to_spec(self) -> AttributeSpec:
        return AttributeSpec(self.name, self.min_value, self.max_value, self.bin_size)


@dataclass
class StreamCfg:
    kind: str
    types: list[str]
    mean_interarrival: list[float]
    attributes: list[AttrCfg]
    path: str | None
    train_events: int
    run_events: int

    def descriptor(self) -> dict:
        d: dict[str, Any] = {
            "kind": self.kind,
            "types": list(self.types),
            "attributes": [
                {
                    "name": a.name,
                    "min": a.min_value,
                    "max": a.max_value,
                    "bin_size": a.bin_size,
                    "low": a.low,
                    "high": a.high,
                }
                for a in self.attributes
            ],
            "train_events": self.train_events,
            "run_events": self.run_events,
        }
        if self.kind == "synthetic":
            d["mean_interarrival"] = list(self.mean_interarrival)
        else:
            d["path"] = self.path
        return d


@dataclass
class QueryCfg:
    id: str
    weight: float
    window: float
    slide: float
    branches: list[dict]
    negation_kills_all: bool


@dataclass
class ShedderCfg:
    kind: str
    history_length: int
    count_bin_size: int
    default_utility: str
    utility_quantum: float
    position_bin_width: int
    tree_max_depth: int | None
    tree_min_samples_split: int
    forest_trees: int
    retrain_interval: int | None
    retrain_buffer: int
    max_observations: int | None


@dataclass
class RuntimeCfg:
    latency_bound: float
    safety_fraction: float
    release_fraction: float
    drop_interval: float | None
    ewma_alpha: float
    rho_max: float
    rho_override: float | None
    cost: float
    cost_per_type: dict[str, float]
    rate: float
    train_rate: float
    warmup_fraction: float


@dataclass
class SeedsCfg:
    stream_train: int = 1
    stream_run: int = 2
    zobrist: int = 3
    forest: int = 4
    sampling: int = 5


@dataclass
class ExperimentConfig:
    stream: StreamCfg
    queries: list[QueryCfg]
    shedder: ShedderCfg
    runtime: RuntimeCfg
    seeds: SeedsCfg
    label: str | None = None

    def build_schema(self) -> StreamSchema:
        return StreamSchema.from_names(self.stream.types, [a.to_spec() for a in self.stream.attributes])

    def build_patterns(self, schema: StreamSchema) -> list[Pattern]:
        return [_build_pattern(q, schema) for q in self.queries]

    def identity(self) -> dict:
        """Everything that pins the experiment apart from the shedding strategy."""
        return {
            "stream": self.stream.descriptor(),
            "queries": [
                {
                    "id": q.id,
                    "weight": q.weight,
                    "window": q.window,
                    "slide": q.slide,
                    "branches": q.branches,
                    "negation_kills_all": q.negation_kills_all,
                }
                for q in self.queries
            ],
            "runtime": {
                "latency_bound": self.runtime.latency_bound,
                "cost": self.runtime.cost,
                "cost_per_type": dict(sorted(self.runtime.cost_per_type.items())),
                "rate": self.runtime.rate,
                "train_rate": self.runtime.train_rate,
                "rho_override": self.runtime.rho_override,
            },
            "seeds": {"stream_train": self.seeds.stream_train, "stream_run": self.seeds.stream_run},
        }


def _build_pattern(q: QueryCfg, schema: StreamSchema) -> Pattern:
    branches = []
    for b in q.branches:
        elements = []
        for spec in b["elements"]:
            elements.append(_build_element(spec, schema))
        try:
            predicate = Predicate.parse(b.get("where", ""), elements, schema)
            branches.append(Branch(elements, predicate))
        except PatternSyntaxError as exc:
            raise ConfigError(f"query {q.id}: {exc}") from None
    try:
        return Pattern(q.id, q.weight, q.window, q.slide, branches)
    except (ValueError, PatternSyntaxError) as exc:
        raise ConfigError(f"query {q.id}: {exc}") from None


def _build_element(spec: dict, schema: StreamSchema) -> Element:
    try:
        if "any" in spec:
            names = spec["any"]
            type_ids = tuple(schema.type_by_name(n).id for n in names)
            alias = spec.get("as", "_".join(names))
            return Element(alias, type_ids, count=int(spec.get("k", 1)))
        name = spec["type"]
        tid = schema.type_by_name(name).id
        alias = spec.get("as", name)
        return Element(
            alias,
            (tid,),
            negated=bool(spec.get("neg", False)),
            kleene=bool(spec.get("kleene", False)),
        )
    except KeyError as exc:
        raise ConfigError(f"pattern element {spec!r}: {exc.args[0]}") from None


def _parse_element_cfg(spec, path: str) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError(f"{path} must be a mapping")
    _check_keys(spec, {"type", "neg", "kleene", "any", "k", "as"}, path)
    if ("type" in spec) == ("any" in spec):
        raise ConfigError(f"{path}: exactly one of 'type' / 'any' required")
    return spec


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw, {"schema", "stream", "query", "queries", "shedder", "runtime", "seeds", "label"}, "")
    schema_id = raw.get("schema", CONFIG_SCHEMA_ID)
    if schema_id != CONFIG_SCHEMA_ID:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA_ID!r}, got {schema_id!r}")

    stream = _parse_stream(_req(raw, "stream", ""))
    queries = _parse_queries(raw)
    shedder = _parse_shedder(raw.get("shedder", {}))
    runtime = _parse_runtime(raw.get("runtime", {}), stream)
    seeds = _parse_seeds(raw.get("seeds", {}))
    label = raw.get("label")
    if label is not None and not isinstance(label, str):
        raise ConfigError("label must be a string")

    cfg = ExperimentConfig(stream, queries, shedder, runtime, seeds, label)
    schema = cfg.build_schema()
    cfg.build_patterns(schema)  # validate patterns eagerly
    return cfg


def _parse_stream(raw) -> StreamCfg:
    if not isinstance(raw, dict):
        raise ConfigError("stream must be a mapping")
    _check_keys(
        raw,
        {"kind", "types", "mu", "mean_interarrival", "attributes", "path", "train_events", "run_events"},
        "stream",
    )
    kind = _str_choice(raw.get("kind", "synthetic"), "stream.kind", ("synthetic", "file"))
    types = _req(raw, "types", "stream")
    if not isinstance(types, list) or not types or not all(isinstance(t, str) for t in types):
        raise ConfigError("stream.types must be a non-empty list of type names")
    attrs_raw = raw.get("attributes", [])
    if not isinstance(attrs_raw, list):
        raise ConfigError("stream.attributes must be a list")
    attributes = [_parse_attr(a, f"stream.attributes[{i}]") for i, a in enumerate(attrs_raw)]
    if "mu" in raw and "mean_interarrival" in raw:
        raise ConfigError("stream: give either mu or mean_interarrival, not both")
    mean = raw.get("mu", raw.get("mean_interarrival", []))
    if kind == "synthetic":
        if not isinstance(mean, list) or len(mean) != len(types):
            raise ConfigError("stream.mu must list one mean inter-arrival per type")
        mean = [_num(m, "stream.mu[]", minimum=1e-12) for m in mean]
        path = None
    else:
        path = _req(raw, "path", "stream")
        if not isinstance(path, str):
            raise ConfigError("stream.path must be a string")
        mean = []
    train_events = _int(raw.get("train_events", 10000), "stream.train_events", minimum=0)
    run_events = _int(raw.get("run_events", 5000), "stream.run_events", minimum=0)
    return StreamCfg(kind, types, mean, attributes, path, train_events, run_events)


def _parse_attr(raw, path: str) -> AttrCfg:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping")
    _check_keys(raw, {"name", "min", "max", "bin_size", "low", "high"}, path)
    name = _req(raw, "name", path)
    low = raw.get("low")
    high = raw.get("high")
    min_v = raw.get("min", low)
    max_v = raw.get("max", high)
    if min_v is None or max_v is None:
        raise ConfigError(f"{path}: need min/max (or low/high) bounds")
    min_v = _num(min_v, f"{path}.min")
    max_v = _num(max_v, f"{path}.max")
    bin_size = _num(raw.get("bin_size", 1), f"{path}.bin_size", minimum=1e-12)
    low = _int(low if low is not None else int(min_v), f"{path}.low")
    high = _int(high if high is not None else int(max_v), f"{path}.high")
    return AttrCfg(name, min_v, max_v, bin_size, low, high)


def _parse_queries(raw: dict) -> list[QueryCfg]:
    if ("query" in raw) == ("queries" in raw):
        raise ConfigError("exactly one of 'query' / 'queries' required")
    items = raw["queries"] if "queries" in raw else [raw["query"]]
    if not isinstance(items, list) or not items:
        raise ConfigError("queries must be a non-empty list")
    out = []
    for i, q in enumerate(items):
        out.append(_parse_query(q, f"queries[{i}]"))
    ids = [q.id for q in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate query ids: {ids}")
    return out


def _parse_query(raw, path: str) -> QueryCfg:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping")
    _check_keys(raw, {"id", "weight", "window", "slide", "branches", "elements", "where", "negation_kills_all"}, path)
    qid = _req(raw, "id", path)
    weight = _num(raw.get("weight", 1.0), f"{path}.weight", minimum=1e-12)
    window = _num(_req(raw, "window", path), f"{path}.window", minimum=1e-12)
    slide = _num(_req(raw, "slide", path), f"{path}.slide", minimum=1e-12)
    if ("branches" in raw) == ("elements" in raw):
        raise ConfigError(f"{path}: exactly one of 'branches' / 'elements' required")
    if "elements" in raw:
        branches_raw = [{"elements": raw["elements"], "where": raw.get("where", "")}]
    else:
        if "where" in raw:
            raise ConfigError(f"{path}.where belongs inside each branch when 'branches' is used")
        branches_raw = raw["branches"]
    if not isinstance(branches_raw, list) or not branches_raw:
        raise ConfigError(f"{path}.branches must be a non-empty list")
    branches = []
    for i, b in enumerate(branches_raw):
        bpath = f"{path}.branches[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"{bpath} must be a mapping")
        _check_keys(b, {"elements", "where"}, bpath)
        elements = _req(b, "elements", bpath)
        if not isinstance(elements, list) or not elements:
            raise ConfigError(f"{bpath}.elements must be a non-empty list")
        elements = [
            _parse_element_cfg(el, f"{bpath}.elements[{j}]") for j, el in enumerate(elements)
        ]
        where = b.get("where", "")
        if not isinstance(where, str):
            raise ConfigError(f"{bpath}.where must be a string")
        branches.append({"elements": elements, "where": where})
    kills_all = raw.get("negation_kills_all", True)
    if not isinstance(kills_all, bool):
        raise ConfigError(f"{path}.negation_kills_all must be a boolean")
    return QueryCfg(str(qid), weight, window, slide, branches, kills_all)


def _parse_shedder(raw) -> ShedderCfg:
    if not isinstance(raw, dict):
        raise ConfigError("shedder must be a mapping")
    _check_keys(
        raw,
        {
            "kind",
            "history_length",
            "count_bin_size",
            "default_utility",
            "utility_quantum",
            "position_bin_width",
            "tree",
            "forest",
            "retrain_interval",
            "retrain_buffer",
            "max_observations",
        },
        "shedder",
    )
    kind = _str_choice(raw.get("kind", "none"), "shedder.kind", SHEDDER_KINDS)
    tree = raw.get("tree", {})
    if not isinstance(tree, dict):
        raise ConfigError("shedder.tree must be a mapping")
    _check_keys(tree, {"max_depth", "min_samples_split"}, "shedder.tree")
    forest = raw.get("forest", {})
    if not isinstance(forest, dict):
        raise ConfigError("shedder.forest must be a mapping")
    _check_keys(forest, {"n_trees"}, "shedder.forest")
    return ShedderCfg(
        kind=kind,
        history_length=_int(raw.get("history_length", 10), "shedder.history_length", minimum=1),
        count_bin_size=_int(raw.get("count_bin_size", 1), "shedder.count_bin_size", minimum=1),
        default_utility=_str_choice(
            raw.get("default_utility", "mean"), "shedder.default_utility", ("mean", "zero", "one")
        ),
        utility_quantum=_num(raw.get("utility_quantum", 1e-3), "shedder.utility_quantum", minimum=1e-12),
        position_bin_width=_int(raw.get("position_bin_width", 5), "shedder.position_bin_width", minimum=1),
        tree_max_depth=_int(tree.get("max_depth", 12), "shedder.tree.max_depth", minimum=1, allow_none=True),
        tree_min_samples_split=_int(
            tree.get("min_samples_split", 4), "shedder.tree.min_samples_split", minimum=2
        ),
        forest_trees=_int(forest.get("n_trees", 10), "shedder.forest.n_trees", minimum=1),
        retrain_interval=_int(raw.get("retrain_interval"), "shedder.retrain_interval", minimum=1, allow_none=True),
        retrain_buffer=_int(raw.get("retrain_buffer", 20000), "shedder.retrain_buffer", minimum=1),
        max_observations=_int(
            raw.get("max_observations", 100000), "shedder.max_observations", minimum=1, allow_none=True
        ),
    )


def _parse_runtime(raw, stream: StreamCfg) -> RuntimeCfg:
    if not isinstance(raw, dict):
        raise ConfigError("runtime must be a mapping")
    _check_keys(
        raw,
        {
            "latency_bound_ms",
            "safety_fraction",
            "release_fraction",
            "drop_interval",
            "ewma_alpha",
            "rho_max",
            "rho_override",
            "cost",
            "rate",
            "train_rate",
            "warmup_fraction",
        },
        "runtime",
    )
    cost_raw = raw.get("cost", 0.05)
    per_type: dict[str, float] = {}
    if isinstance(cost_raw, dict):
        _check_keys(cost_raw, {"base", "per_type"}, "runtime.cost")
        base = _num(_req(cost_raw, "base", "runtime.cost"), "runtime.cost.base", minimum=1e-12)
        pt = cost_raw.get("per_type", {})
        if not isinstance(pt, dict):
            raise ConfigError("runtime.cost.per_type must be a mapping")
        for name, v in pt.items():
            if name not in stream.types:
                raise ConfigError(f"runtime.cost.per_type: unknown type {name!r}")
            per_type[name] = _num(v, f"runtime.cost.per_type.{name}", minimum=1e-12)
    else:
        base = _num(cost_raw, "runtime.cost", minimum=1e-12)
    return RuntimeCfg(
        latency_bound=_num(raw.get("latency_bound_ms", 1000.0), "runtime.latency_bound_ms", minimum=1e-6)
        / 1000.0,
        safety_fraction=_num(raw.get("safety_fraction", 0.8), "runtime.safety_fraction", 0.0, 1.0),
        release_fraction=_num(raw.get("release_fraction", 0.5), "runtime.release_fraction", 0.0, 1.0),
        drop_interval=_num(raw.get("drop_interval"), "runtime.drop_interval", minimum=1e-9, allow_none=True),
        ewma_alpha=_num(raw.get("ewma_alpha", 0.3), "runtime.ewma_alpha", 1e-6, 1.0),
        rho_max=_num(raw.get("rho_max", 0.95), "runtime.rho_max", 0.0, 1.0),
        rho_override=_num(raw.get("rho_override"), "runtime.rho_override", 0.0, 1.0, allow_none=True),
        cost=base,
        cost_per_type=per_type,
        rate=_num(raw.get("rate", 1.0), "runtime.rate", minimum=1e-9),
        train_rate=_num(raw.get("train_rate", 0.9), "runtime.train_rate", minimum=1e-9),
        warmup_fraction=_num(raw.get("warmup_fraction", 0.25), "runtime.warmup_fraction", 0.0, 0.95),
    )


def _parse_seeds(raw) -> SeedsCfg:
    if not isinstance(raw, dict):
        raise ConfigError("seeds must be a mapping")
    _check_keys(raw, {"stream_train", "stream_run", "zobrist", "forest", "sampling"}, "seeds")
    defaults = SeedsCfg()
    return SeedsCfg(
        stream_train=_int(raw.get("stream_train", defaults.stream_train), "seeds.stream_train"),
        stream_run=_int(raw.get("stream_run", defaults.stream_run), "seeds.stream_run"),
        zobrist=_int(raw.get("zobrist", defaults.zobrist), "seeds.zobrist"),
        forest=_int(raw.get("forest", defaults.forest), "seeds.forest"),
        sampling=_int(raw.get("sampling", defaults.sampling), "seeds.sampling"),
    )


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides onto the raw mapping (values parsed as YAML)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, text = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            raise ConfigError(f"override {item!r}: unparsable value") from None
        node = raw
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = {}
                node[k] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {k} is not a mapping")
            node = nxt
        node[keys[-1]] = value
    return raw


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML/JSON: {exc}") from None
    if raw is None:
        raw = {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw)
