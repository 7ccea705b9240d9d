"""Command-line entry point: generate streams, train models, run experiments,
compare reports, and inspect saved models.

Exit codes: 0 success, 2 configuration/usage error, 3 latency-bound violation
under --assert-lb.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_config
from .events import StreamFormatError, write_stream
from .harness import (
    QoRReport,
    build_streams,
    compare_reports,
    comparison_csv,
    run_experiment,
    run_training,
    shedder_from_bundle,
    trained_bundle,
)
from .models import load_model_file
from .stats import dump_aggregates_csv
from .synthetic import SyntheticSpec, UniformIntAttr, generate_synthetic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LB_VIOLATION = 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file (YAML or JSON)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="override a config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cepshed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic stream to a CSV file")
    _add_config_args(g)
    g.add_argument("--out", required=True, help="output stream file")
    g.add_argument("--count", type=int, default=None, help="events to generate (default: train+run)")
    g.add_argument("--seed", type=int, default=None, help="stream seed (default: seeds.stream_train)")

    t = sub.add_parser("train", help="train the configured shedder and save the model file")
    _add_config_args(t)
    t.add_argument("--out", required=True, help="output model file (JSON)")
    t.add_argument("--stats-csv", default=None, help="also dump aggregated observations as CSV")

    r = sub.add_parser("run", help="run one experiment and write its report")
    _add_config_args(r)
    r.add_argument("--out-dir", required=True, help="directory for report files")
    r.add_argument("--model", default=None, help="use a pre-trained model file instead of training")
    r.add_argument("--assert-lb", action="store_true", help="exit 3 if any latency exceeds the bound")

    c = sub.add_parser("compare", help="tabulate reports from the same experiment")
    c.add_argument("reports", nargs="+", help="report JSON files")
    c.add_argument("--out", default=None, help="output file (.csv or .json); default prints CSV")

    i = sub.add_parser("inspect-model", help="summarize a saved model file")
    i.add_argument("model", help="model file (JSON)")
    return parser


def _cmd_generate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if cfg.stream.kind != "synthetic":
        raise ConfigError("generate requires stream.kind=synthetic")
    schema = cfg.build_schema()
    count = args.count if args.count is not None else cfg.stream.train_events + cfg.stream.run_events
    seed = args.seed if args.seed is not None else cfg.seeds.stream_train
    spec = SyntheticSpec(
        schema,
        cfg.stream.mean_interarrival,
        [UniformIntAttr(a.low, a.high) for a in cfg.stream.attributes],
        count=count,
        seed=seed,
    )
    stream = generate_synthetic(spec)
    write_stream(stream, args.out, schema)
    print(f"wrote {len(stream)} events to {args.out}")
    return EXIT_OK


def _train(cfg):
    schema = cfg.build_schema()
    patterns = cfg.build_patterns(schema)
    train_stream, _ = build_streams(cfg, schema)
    kills_all = all(q.negation_kills_all for q in cfg.queries)
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
    return schema, patterns, training


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if cfg.shedder.kind == "none":
        raise ConfigError("shedder.kind=none has nothing to train")
    schema, patterns, training = _train(cfg)
    doc = trained_bundle(cfg, training, patterns)
    with open(args.out, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    if args.stats_csv:
        dump_aggregates_csv(args.stats_csv, training.agg, schema)
    print(f"trained {cfg.shedder.kind} on {training.n_observations} observations -> {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    shedder = None
    if args.model is not None:
        doc = load_model_file(args.model)
        schema = cfg.build_schema()
        patterns = cfg.build_patterns(schema)
        shedder = shedder_from_bundle(cfg, doc, patterns)
    report = run_experiment(cfg, shedder=shedder)
    os.makedirs(args.out_dir, exist_ok=True)
    label = cfg.label or "experiment"
    path = os.path.join(args.out_dir, f"report-{label}-{cfg.shedder.kind}.json")
    with open(path, "w") as f:
        f.write(report.to_json())
    csv_path = path[: -len(".json")] + ".csv"
    with open(csv_path, "w") as f:
        f.write(_report_csv(report))
    print(
        f"{cfg.shedder.kind}: objective={report.weighted_objective} "
        f"drop_ratio={report.drop_ratio:.4f} max_latency={report.latency_max:.4f} "
        f"violations={report.lb_violations} -> {path}"
    )
    if args.assert_lb and report.lb_violations > 0:
        print(f"latency bound violated {report.lb_violations} times", file=sys.stderr)
        return EXIT_LB_VIOLATION
    return EXIT_OK


def _report_csv(report: QoRReport) -> str:
    cols: list[tuple[str, object]] = [("shedder", report.shedder)]
    for pid in sorted(report.per_pattern):
        pp = report.per_pattern[pid]
        for k in ("ground_truth", "detected", "false_negatives", "false_positives", "fn_pct", "fp_pct"):
            cols.append((f"{k}_{pid}", pp[k]))
    cols += [
        ("weighted_objective", report.weighted_objective),
        ("drop_ratio", report.drop_ratio),
        ("steady_drop_ratio", report.steady_drop_ratio),
        ("latency_p50", report.latency_p50),
        ("latency_p99", report.latency_p99),
        ("latency_max", report.latency_max),
        ("lb_violations", report.lb_violations),
        ("events_total", report.events_total),
        ("events_dropped", report.events_dropped),
    ]
    header = ",".join(name for name, _ in cols)
    row = ",".join("" if v is None else str(v) for _, v in cols)
    return header + "\n" + row + "\n"


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(QoRReport.from_json(f.read()))
    try:
        comparison = compare_reports(reports)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.out is None:
        print(comparison_csv(comparison), end="")
    elif args.out.endswith(".json"):
        with open(args.out, "w") as f:
            json.dump(comparison, f, sort_keys=True, indent=2)
            f.write("\n")
    else:
        with open(args.out, "w") as f:
            f.write(comparison_csv(comparison))
    return EXIT_OK


def _cmd_inspect(args) -> int:
    doc = load_model_file(args.model)
    kind = doc["kind"]
    print(f"kind: {kind}")
    model = doc.get("model", {})
    if kind == "gspice-h":
        sizes = [len(t) for t in model["tables"]]
        print(f"table entries per type: {sizes} (total {sum(sizes)})")
        print(f"defaults: {model['defaults']}")
    elif kind == "gspice-t":
        nodes = model["nodes"]
        print(f"tree nodes: {len(nodes)} (depth {_preorder_depth(nodes)})")
    elif kind == "gspice-f":
        depths = [_preorder_depth(t) for t in model["trees"]]
        print(f"forest: {len(model['trees'])} trees, depths {depths}")
    elif kind == "espice":
        print(f"(type, position-bin) utilities: {len(model['utilities'])}")
        print(f"position bin width: {model['position_bin_width']}, slide: {model['slide']}")
    elif kind == "bl":
        print(f"type shares: {model['shares']}")
        print(f"type scores: {model['scores']}")
    if "histogram" in doc:
        print(f"histogram buckets: {len(doc['histogram']['values'])}")
    return EXIT_OK


def _preorder_depth(nodes: list[dict]) -> int:
    pos = 0

    def walk(depth: int) -> int:
        nonlocal pos
        node = nodes[pos]
        pos += 1
        if "leaf" in node:
            return depth
        left = walk(depth + 1)
        right = walk(depth + 1)
        return max(left, right)

    return walk(0) if nodes else 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "run": _cmd_run,
        "compare": _cmd_compare,
        "inspect-model": _cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, StreamFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
