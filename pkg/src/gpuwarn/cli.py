"""Command-line front end: ``gpuwarn <subcommand> --out DIR [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, pipeline
from .detectors import DETECTORS
from .forensics import AlignmentError
from .ingest import ArchiveError
from .pipeline import RunConfig, RunState
from .synth import REGIMES, generate, make_scenario, write_scenario

SUBCOMMANDS = ("ingest-stats", "refine-catalog", "features", "detect", "evaluate",
               "forensics", "synth", "all")

# flag -> (config field, type, help)
_FLAGS: list[tuple[str, str, type, str]] = [
    ("--window", "window_length", int, "window length w in seconds (3600)"),
    ("--stride", "stride", int, "window stride s in seconds (600)"),
    ("--cap", "per_node_cap", int, "per-node training window cap (500)"),
    ("--seed", "seed", int, "seed for sampling, detectors and scenarios (0)"),
    ("--baseline-horizon", "baseline_horizon", int, "trailing-median horizon in windows (144)"),
    ("--roll-horizon", "roll_horizon", int, "rolling-slope horizon in windows (32)"),
    ("--start", "start_time", int, "slice start, epoch seconds"),
    ("--end", "end_time", int, "slice end, epoch seconds"),
    ("--budget", "budget", float, "alert budget as a fraction of windows (0.01)"),
    ("--smooth", "smooth", int, "trailing smoothing window (5)"),
    ("--if-trees", "if_trees", int, "isolation forest trees (100)"),
    ("--if-subsample", "if_subsample", int, "isolation forest subsample size (256)"),
    ("--svm-nu", "svm_nu", float, "one-class SVM nu (0.05)"),
    ("--svm-max-train", "svm_max_train", int, "one-class SVM training cap (2000)"),
    ("--q", "q", float, "signature quantile for weak events (0.99)"),
    ("--min-run", "min_run", int, "minimum weak-event length in windows (3)"),
    ("--lookback", "lookback", int, "lead-time lookback in windows (48)"),
    ("--scrape-interval", "scrape_interval", int, "scrape interval in seconds (600)"),
    ("--dropout", "dropout", int, "sustained collapse length in seconds (3000)"),
    ("--baseline", "baseline_minutes", float, "forensic baseline interval in minutes (30)"),
    ("--adjacent", "adjacent_minutes", float, "forensic adjacent interval in minutes (5)"),
    ("--catalog", "catalog", str, "incident catalog CSV"),
    ("--transitions", "transitions", str, "scheduler transitions CSV"),
    ("--category", "category", str, "case-insensitive regex on incident category"),
    ("--scenario-nodes", "scenario_nodes", int, "nodes in a synthetic scenario (1)"),
    ("--scenario-days", "scenario_days", float, "days in a synthetic scenario (7)"),
]


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--config", help="JSON config or a previous manifest.json")
    common.add_argument("--archive", action="append", dest="archives",
                        help="tidy archive (.csv or .csv.bz2); repeatable")
    common.add_argument("--nodes", nargs="+", help="restrict the slice to these nodes")
    common.add_argument("--detectors", nargs="+", choices=DETECTORS)
    common.add_argument("--per-node-threshold", action="store_true", default=None)
    common.add_argument("--pooled-quantile", action="store_true", default=None)
    common.add_argument("--lead-mode", choices=("include-zero", "exclude"))
    common.add_argument("--side", dest="adjacent_side", choices=("before", "after"))
    common.add_argument("--scenario", choices=REGIMES)
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, dest, typ, text in _FLAGS:
        common.add_argument(flag, dest=dest, type=typ, help=text)

    parser = argparse.ArgumentParser(prog="gpuwarn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    values = asdict(RunConfig())
    if args.config:
        data = json.loads(Path(args.config).read_text())
        if "config" in data and isinstance(data["config"], dict):
            replay_ts = data.get("runTimestamp")
            data = dict(data["config"])
            data.setdefault("run_timestamp", replay_ts)
        values.update(data)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig.from_dict(values)


def run_timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(epoch) if epoch else int(time.time())
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def execute(command: str, cfg: RunConfig, out: Path) -> RunState:
    if cfg.run_timestamp is None:
        cfg.run_timestamp = run_timestamp()

    if command == "synth" or (command == "all" and cfg.scenario):
        _require(cfg.scenario is not None, f"{command} needs --scenario")
        spec = make_scenario(cfg.scenario, cfg.seed, cfg.scenario_nodes, cfg.scenario_days)
        scenario = generate(spec)
        target = out if command == "synth" else out / "scenario"
        paths = write_scenario(scenario, target)
        state = RunState(cfg, out)
        state.outputs += [str(p.relative_to(out)) for p in paths.values()]
        state.diagnostics["scenario"] = {"regime": spec.regime, "sampleCount": len(scenario.samples),
                                         "events": scenario.truth["events"]}
        if command == "synth":
            return state
        state.archive_paths = [str(p) for k, p in sorted(paths.items()) if k.startswith("archive:")]
        state.catalog_path = str(paths["catalog"])
        state.transitions_path = str(paths["transitions"])
    else:
        state = RunState(cfg, out)

    needs_archive = command in ("ingest-stats", "features", "detect", "evaluate", "forensics", "all")
    needs_catalog = command in ("refine-catalog", "forensics", "all")
    _require(not needs_archive or bool(state.archive_paths), f"{command} needs --archive")
    _require(not needs_catalog or bool(state.catalog_path), f"{command} needs --catalog")
    out.mkdir(parents=True, exist_ok=True)

    if state.archive_paths:
        pipeline.load_samples(state)
    if command in ("ingest-stats", "all"):
        pipeline.stage_ingest(state)
    if command in ("features", "detect", "evaluate", "all"):
        pipeline.stage_features(state, write=command in ("features", "all"))
    if command in ("detect", "evaluate", "all"):
        pipeline.stage_detect(state, write=True)
    if command in ("evaluate", "all"):
        pipeline.stage_evaluate(state)
    if needs_catalog:
        pipeline.load_records(state)
    if command in ("refine-catalog", "all"):
        pipeline.stage_refine(state)
    if command in ("forensics", "all"):
        pipeline.stage_forensics(state)
    return state


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        state = execute(args.command, cfg, Path(args.out))
        pipeline.write_manifest(state, args.command)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gpuwarn: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArchiveError, AlignmentError, OSError, json.JSONDecodeError) as exc:
        print(f"gpuwarn: fatal: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
