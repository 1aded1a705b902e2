#!/usr/bin/env python3
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Any, TextIO

from hskip.config import build_campaign, load_config
from hskip.core import DEFAULT_CAP, BandwidthKey, BitStream, seed_for
from hskip.errors import ConfigParse, DumpParseError, HSkipError
from hskip.experiments import RunRecord, ScenarioConfig, iter_runs, run_scenario
from hskip.oracle import GlobalView, ViewNode, is_legal
from hskip.renderer import render_diff, write_csv
from hskip.scaling import fit_log_linear, fit_loglog_slope, medians_by_n

SCENARIO_COMMANDS = {
    "converge": "converge",
    "join": "join",
    "leave": "leave",
    "change": "change",
    "crash": "crash",
    "attack": "attack",
    "flow": "flow",
    "random-target-flow": "random_target_flow",
}
DEFAULT_CSV = "result/hskip-runs.csv"


def _int(text: str) -> int:
    return int(text, 0)


def parse_args(argv: list[str]) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_int, help="Global seed (default: $HSKIP_SEED or 0)")
    common.add_argument("--out", help=f"CSV file rows are appended to (default: {DEFAULT_CSV})")
    common.add_argument("--trace", help="Write the message log of every run to this file")
    common.add_argument(
        "--workers", type=int, default=1, help="Worker threads for independent runs"
    )
    common.add_argument(
        "--log-level", default="INFO", help="Logging level (DEBUG, INFO, WARNING, ERROR)"
    )

    p = argparse.ArgumentParser(description="HSkip+ overlay simulator")
    sub = p.add_subparsers(dest="command", required=True)

    for name in SCENARIO_COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=f"Run the {name} scenario")
        sp.add_argument("--n", type=int, default=64, help="Number of nodes")
        sp.add_argument("--repeats", type=int, default=1, help="Runs with derived seeds")
        sp.add_argument("--max-rounds", type=int, help="Round cap (default: ceil(50*log2 n))")
        sp.add_argument("--dist", help="pareto:ALPHA,SCALE | uniform:LO,HI | empirical:PATH")
        sp.add_argument("--fraction", type=float, default=0.0, help="Churn fraction in [0, 1)")
        sp.add_argument("--mode", choices=["random", "contiguous"], default="random")
        sp.add_argument("--scheduler", choices=["sync", "async"], default="sync")
        sp.add_argument("--churn-lookups", type=int, default=0, help="Lookups injected at churn")
        sp.add_argument("--cap", type=int, default=DEFAULT_CAP, help="Bit-stream depth")
        sp.add_argument("--check-invariants", action="store_true", help="Sweep invariants")

    cp = sub.add_parser("campaign", parents=[common], help="Run every scenario of a config file")
    cp.add_argument("--config", default="config.yaml", help="Path to the campaign file")

    oc = sub.add_parser("oracle-check", help="Print the legality diff of a world dump")
    oc.add_argument("dump", help="JSON world dump")
    oc.add_argument(
        "--log-level", default="INFO", help="Logging level (DEBUG, INFO, WARNING, ERROR)"
    )
    return p.parse_args(argv)


def setup_logging(level: str) -> None:
    level_num = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(
        level=level_num,
        format="%(asctime)s hskip %(levelname)s %(message)s",
    )


def _resolve_seed(cli_seed: int | None) -> int:
    if cli_seed is not None:
        return cli_seed
    env_seed = os.getenv("HSKIP_SEED")
    return int(env_seed, 0) if env_seed else 0


def _run_all(
    configs: list[ScenarioConfig], workers: int, trace: TextIO | None, log: logging.Logger
) -> list[RunRecord]:
    runs = list(iter_runs(configs))
    if trace is not None and workers > 1:
        log.info("--trace given: running %d runs on one thread", len(runs))
        workers = 1
    if workers <= 1:
        return [run_scenario(cfg, seed, trace) for cfg, seed in runs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: run_scenario(r[0], r[1]), runs))


def _medians(rows: list[RunRecord], field: str) -> tuple[list[int], list[float]] | None:
    pairs = [(r.n, getattr(r, field)) for r in rows if getattr(r, field) is not None]
    ns, ys = medians_by_n(pairs)
    return (ns, ys) if len(ns) >= 2 else None


def _fits(records: list[RunRecord]) -> dict[str, Any]:
    """Scaling fits per scenario over the medians of every n that was run.

    Linear fits are against log2 n; ``*_loglog_slope`` is the exponent k in
    ``y ~ (log2 n)^k``, so join costs of order log2 n squared show up as k <= 2.
    """
    out: dict[str, Any] = {}
    by_scenario: dict[str, list[RunRecord]] = {}
    for r in records:
        if r.legal:
            by_scenario.setdefault(r.scenario, []).append(r)
    for scenario, rows in sorted(by_scenario.items()):
        ns, rounds = medians_by_n((r.n, r.rounds_to_legal) for r in rows)
        if len(ns) < 2:
            continue
        entry: dict[str, Any] = {"n": ns, "median_rounds": rounds}
        fit = fit_log_linear(ns, rounds)
        entry["rounds_vs_log2n"] = {"a": fit.intercept, "b": fit.slope, "r2": fit.r2}
        _, per_node = medians_by_n((r.n, r.total_messages / r.n) for r in rows)
        if all(y > 0 for y in per_node) and min(ns) > 2:
            slope = fit_loglog_slope(ns, per_node)
            entry["messages_per_node_loglog_slope"] = slope.slope
        for field in ("additional_messages", "structural_changes"):
            medians = _medians(rows, field)
            if medians and min(medians[0]) > 2 and all(y > 0 for y in medians[1]):
                entry[f"{field}_loglog_slope"] = fit_loglog_slope(*medians).slope
                entry[f"median_{field}"] = medians[1]
        for field in ("avg_normalized_congestion", "dilation"):
            medians = _medians(rows, field)
            if medians:
                fit = fit_log_linear(*medians)
                entry[f"{field}_vs_log2n"] = {"a": fit.intercept, "b": fit.slope, "r2": fit.r2}
                entry[f"median_{field}"] = medians[1]
        out[scenario] = entry
    return out


def _write_run_summary(summary_path: str, records: list[RunRecord], log: logging.Logger) -> None:
    """Write a run summary JSON file with per-run extras, totals and scaling fits."""
    runs = [
        {
            "run_id": r.run_id,
            "legal": r.legal,
            "structural_changes": r.structural_changes,
            "periodic_messages": r.periodic_messages,
            "reactive_messages": r.reactive_messages,
            "max_congestion": r.max_congestion,
            "delivered_ratio": r.delivered_ratio,
            "attack_offset": r.attack_offset,
            "isolation_events": r.isolation_events,
            "violations": list(r.violations),
        }
        for r in sorted(records, key=lambda r: r.sort_key)
    ]
    stats = {
        "runs": len(records),
        "legal": sum(1 for r in records if r.legal),
        "with_violations": sum(1 for r in records if r.violations),
        "total_messages": sum(r.total_messages for r in records),
    }
    summary = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "stats": stats,
        "fits": _fits(records),
        "runs": runs,
    }

    summary_dir = os.path.dirname(summary_path)
    if summary_dir:
        os.makedirs(summary_dir, exist_ok=True)
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)

    log.info("Run Summary (written to %s):", summary_path)
    log.info("  Runs: %d", stats["runs"])
    log.info("  Legal: %d", stats["legal"])
    log.info("  With violations: %d", stats["with_violations"])


def _report(
    records: list[RunRecord], csv_path: str, log: logging.Logger, summary_path: str | None = None
) -> int:
    written = write_csv(records, csv_path)
    log.info("Appended %d rows to %s", written, csv_path)
    summary_path = summary_path or os.path.join(os.path.dirname(csv_path), "run-summary.json")
    _write_run_summary(summary_path, records, log)
    bad = [r for r in records if not r.legal or r.violations]
    if not bad:
        return 0
    for r in sorted(bad, key=lambda r: r.sort_key):
        reason = "; ".join(r.violations[:5]) if r.violations else "not legal within the round cap"
        print(f"{r.run_id}: {reason}", file=sys.stderr)
    print(f"{len(bad)} of {len(records)} runs failed", file=sys.stderr)
    return 1


def run_campaign(config_path: str, overrides: dict[str, Any], log: logging.Logger) -> int:
    try:
        cfg = load_config(config_path)
        if overrides.get("out"):
            cfg["output"]["csv"] = overrides["out"]
        campaign = build_campaign(cfg, overrides.get("seed"))
    except (ConfigParse, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    log.info("Campaign %s: %d scenario entries", config_path, len(campaign.scenarios))
    trace = open(overrides["trace"], "w", encoding="utf-8") if overrides.get("trace") else None
    try:
        records = _run_all(campaign.scenarios, overrides.get("workers", 1), trace, log)
    finally:
        if trace is not None:
            trace.close()
    return _report(records, campaign.csv, log, campaign.summary)


def load_dump(path: str) -> tuple[GlobalView, set, dict, dict[int, str]]:
    """Parse a world dump: ``{"cap"?, "nodes": [...], "edges": [{src, dst, bw?}]}``."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DumpParseError(f"Cannot read {path}: {e}") from e
    try:
        cap = int(data.get("cap", DEFAULT_CAP))
        nodes, names, ids = [], {}, {}
        for entry in data["nodes"]:
            node_id = int(entry["id"])
            rs = BitStream.with_prefix(str(entry.get("rs", "")), seed_for(node_id), cap)
            nodes.append(ViewNode(node_id, rs, BandwidthKey(float(entry["bw"]), node_id)))
            label = str(entry.get("label", node_id))
            names[node_id] = label
            ids[label] = ids[str(node_id)] = node_id
        view = GlobalView(nodes)
        edges, cached = set(), {}
        for entry in data.get("edges", []):
            v, w = ids[str(entry["src"])], ids[str(entry["dst"])]
            edges.add((v, w))
            cached[(v, w)] = float(entry.get("bw", view.node(w).key.bw))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise DumpParseError(f"Malformed world dump {path}: {e!r}") from e
    return view, edges, cached, names


def oracle_check(dump_path: str, log: logging.Logger) -> int:
    try:
        view, edges, cached, names = load_dump(dump_path)
    except DumpParseError as e:
        print(str(e), file=sys.stderr)
        return 2
    report = is_legal(view, edges, cached)
    sys.stdout.write(render_diff(report, names))
    log.info("%s: %s", dump_path, "legal" if report.legal else "not legal")
    return 0 if report.legal else 1


def _scenario_from_args(args: argparse.Namespace) -> ScenarioConfig:
    return ScenarioConfig.from_mapping(
        {
            "scenario": SCENARIO_COMMANDS[args.command],
            "n": args.n,
            "seed": _resolve_seed(args.seed),
            "dist": args.dist,
            "max_rounds": args.max_rounds,
            "repeats": args.repeats,
            "fraction": args.fraction,
            "mode": args.mode,
            "scheduler": args.scheduler,
            "churn_lookups": args.churn_lookups,
            "cap": args.cap,
            "check_invariants": args.check_invariants,
        }
    )


def main(argv: list[str] | None = None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    setup_logging(args.log_level)
    log = logging.getLogger("hskip")

    if args.command == "oracle-check":
        return oracle_check(args.dump, log)

    if args.command == "campaign":
        overrides = {
            "seed": args.seed,
            "out": args.out,
            "trace": args.trace,
            "workers": args.workers,
        }
        return run_campaign(args.config, overrides, log)

    try:
        cfg = _scenario_from_args(args)
    except (HSkipError, ValueError) as e:
        print(f"invalid arguments: {e}", file=sys.stderr)
        return 2
    trace = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        records = _run_all([cfg], args.workers, trace, log)
    finally:
        if trace is not None:
            trace.close()
    return _report(records, args.out or DEFAULT_CSV, log)


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
