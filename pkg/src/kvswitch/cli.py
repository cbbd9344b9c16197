"""Command-line front end: run experiments, generate traces, sweep parameters.

Exit codes: 0 success, 1 invalid configuration (the message names the bad
key), 2 simulation abort (deadlock diagnostic). Output files are written
atomically. KVSWITCH_LOG selects log verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, RunSettings
from .engine import DeadlockError, Engine, MetricsReport
from .workload import generate, ingest, write_trace

log = logging.getLogger("kvswitch")


def _setup_logging() -> None:
    level = os.environ.get("KVSWITCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _conversations(settings: RunSettings):
    if settings.trace_path:
        return ingest(settings.trace_path)
    return generate(settings.workload)


def _execute(settings: RunSettings) -> MetricsReport:
    engine = Engine(settings.engine, _conversations(settings))
    if settings.iteration_log is not None:
        engine.iteration_log = []
    report = engine.run()
    if settings.iteration_log is not None:
        lines = "\n".join(json.dumps(rec, sort_keys=True) for rec in engine.iteration_log)
        _atomic_write(settings.iteration_log, lines + "\n")
    return report


def cmd_run(args: argparse.Namespace) -> int:
    try:
        doc = _load_doc(args.config)
        doc = _apply_overrides(doc, args)
        settings = cfgmod.build(doc)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        report = _execute(settings)
    except DeadlockError as exc:
        print(f"simulation aborted:\n{exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    json_path = args.out or settings.report_json
    csv_path = settings.report_csv
    if json_path:
        _atomic_write(json_path, report.to_json() + "\n")
        log.info("report written to %s", json_path)
    if csv_path:
        _atomic_write(csv_path, report.to_csv())
    if not json_path and not csv_path:
        print(report.to_json())
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    try:
        doc = _load_doc(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
        settings = cfgmod.build(doc)
        conversations = generate(settings.workload)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        tmp_target = Path(args.out)
        tmp_target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=tmp_target.parent, prefix=f".{tmp_target.name}.")
        os.close(fd)
        write_trace(conversations, tmp)
        os.replace(tmp, tmp_target)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 1
    log.info("trace with %d conversations written to %s", len(conversations), args.out)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        values = _parse_values(args.values)
        doc = _load_doc(args.config)
        cfgmod.validate(doc)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    rows = []
    header: list[str] = []
    for value in values:
        shard = copy.deepcopy(doc)
        try:
            full = cfgmod.validate(shard)
            cfgmod.set_by_path(full, args.param, value)
            settings = cfgmod.build(full)
            report = _execute(settings)
        except (ConfigError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except DeadlockError as exc:
            print(f"simulation aborted at {args.param}={value}:\n{exc}", file=sys.stderr)
            return 2
        scalars = {
            k: v for k, v in report.to_dict().items() if not isinstance(v, dict)
        }
        if not header:
            header = sorted(scalars)
        rows.append((value, scalars))
        log.info("%s=%s done", args.param, value)

    lines = [",".join([args.param] + header)]
    for value, scalars in rows:
        lines.append(",".join([str(value)] + [str(scalars[k]) for k in header]))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    return 0


def _load_doc(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "top level must be a JSON object")
    return doc


def _apply_overrides(doc: dict, args: argparse.Namespace) -> dict:
    doc = copy.deepcopy(doc)
    if getattr(args, "ablation", None):
        doc["ablation"] = args.ablation
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return doc


def _parse_values(raw: str) -> list:
    parts = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not parts:
        raise ConfigError("values", "empty value list")
    out = []
    for p in parts:
        number = float(p)
        out.append(int(number) if number.is_integer() else number)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvswitch",
        description="Trace-driven simulator for priority-preemptive LLM serving "
        "with block-group KV-cache swapping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one simulation from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--ablation", choices=("baseline", "blockgroup", "blockgroup_reuse", "full"))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="JSON report path (overrides output.report_json)")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-trace", help="generate a workload trace as JSONL")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_trace)

    sweep = sub.add_parser("sweep", help="run once per value of a numeric config key")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True, help="dotted key, e.g. trace.frequency")
    sweep.add_argument("--values", required=True, help="comma-separated numbers")
    sweep.add_argument("--out", required=True, help="combined CSV path")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
