"""Command line entry point: ``cpsbot run|validate|replay-trace``.

Exit codes: 0 success, 1 runtime failure, 2 invalid or missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import List, Optional

from . import __version__
from .metrics import MetricsError, compute_report, emit_report
from .netfabric import Trace
from .scenario import ConfigValidationError, ScenarioConfig, ScenarioError, load_preset, preset_names, run_scenario

log = logging.getLogger("cpsbot")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def load_config(ref: str) -> ScenarioConfig:
    """A TOML path, or the name of a bundled preset."""
    path = Path(ref)
    if path.is_file():
        return ScenarioConfig.load(path)
    if ref in preset_names():
        return load_preset(ref)
    raise FileNotFoundError(f"{ref}: no such file or preset (presets: {', '.join(preset_names())})")


def cmd_run(args) -> int:
    cfg = load_config(args.config).validate()
    file_seed = cfg.seed
    if args.seed is not None:
        cfg.seed = args.seed
    result = run_scenario(cfg, sample_host=args.sample_host or None)
    text = emit_report(result.report, args.format)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.trace.write(out / "trace.jsonl")
        emit_report(result.report, "csv", out / "metrics.csv")
        emit_report(result.report, "json", out / "metrics.json")
        (out / "report.txt").write_text(emit_report(result.report, "table"), encoding="utf-8")
        effective = cfg.dump(out / "scenario.toml")
        manifest = {"tool": "cpsbot", "version": __version__, "scenario": cfg.name,
                    "config_sha256": hashlib.sha256(effective.encode()).hexdigest(),
                    "seed": cfg.seed, "config_file_seed": file_seed,
                    "seed_overridden": args.seed is not None,
                    "virtual_start_s": 0.0, "virtual_end_s": cfg.duration,
                    "trace_digest": result.trace.digest(), "trace_records": len(result.trace),
                    "phases": result.phases.entries,
                    "files": ["trace.jsonl", "metrics.csv", "metrics.json", "report.txt", "scenario.toml"]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        log.info("wrote run artifacts to %s", out)
    return EXIT_OK


def cmd_validate(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        load_config(args.config).validate()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_replay_trace(args) -> int:
    try:
        trace = Trace.read(args.trace)
    except FileNotFoundError:
        print(f"error: {args.trace}: no such file", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(emit_report(compute_report(trace), args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsbot", description="Simulate a pub-sub coordinated ICS botnet.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and report metrics")
    run.add_argument("config", help="scenario TOML file or preset name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None, help="directory for trace, metrics and manifest")
    run.add_argument("--format", choices=("table", "csv", "json"), default="table")
    run.add_argument("--sample-host", action="store_true", help="report host CPU and memory use")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario config")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("replay-trace", help="recompute metrics from a saved trace")
    rep.add_argument("trace")
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")
    rep.set_defaults(func=cmd_replay_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ScenarioError, MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
