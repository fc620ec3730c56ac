"""Command-line entry point: ``pilotrt run|validate|metrics|presets``."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from .core import read_event_log, validate_event_log
from .resources import InvalidSpec, NodeSpec, build_allocation

log = logging.getLogger("pilotrt")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2

_ALLOC = re.compile(r"^(\d+)x(\d+)(?:x(\d+))?$")


def parse_alloc(text: str):
    """``NODESxCORES[xGPUS]``, e.g. ``4x56x8``."""
    m = _ALLOC.match(text.strip().lower())
    if not m:
        raise ValueError(f"bad allocation {text!r}; expected NODESxCORES[xGPUS]")
    nodes, cores, gpus = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
    return build_allocation(nodes, NodeSpec(cores, gpus))


def _overrides(args) -> list[str]:
    ov = list(args.set or [])
    if args.mode:
        ov.append(f"experiment.mode={args.mode}")
    if args.seed is not None:
        ov.append(f"experiment.seed={args.seed}")
    if args.time_scale is not None:
        ov.append(f"experiment.time_scale={args.time_scale}")
    if args.out:
        ov.append(f"experiment.output_dir={args.out}")
    return ov


def cmd_run(args) -> int:
    from .harness import ConfigError, load_config, run_experiment

    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reps = cfg.get("experiment", "repetitions")
    base = Path(cfg.output_dir) / cfg.exp_id
    status = EXIT_OK
    for i in range(reps):
        rcfg = cfg
        out = base
        if reps > 1:
            rcfg = load_config(args.config, _overrides(args) + [f"experiment.seed={cfg.seed + i}"])
            out = base / f"rep_{i}"
        result = run_experiment(rcfg, out_dir=out)
        rep = result.report
        line = f"[{i + 1}/{reps}] {result.status} -> {out}"
        if rep is not None:
            line += (f"  makespan={rep.makespan_s:.3f}s util={rep.utilization_pct:.2f}%"
                     f" avg_tput={rep.avg_throughput:.3f}/s done={rep.tasks_done} failed={rep.tasks_failed}")
        else:
            line += f"  no report: {result.report_error}"
        print(line)
        if result.status != "complete":
            status = EXIT_INVALID
    return status


def _load_checked(path: str):
    """Read and validate a log; returns (events, exit code)."""
    try:
        events = read_event_log(path)
    except (OSError, ValueError) as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return None, EXIT_INVALID
    rep = validate_event_log(events)
    if not rep.legal:
        print(f"{path}: {len(rep)} violation(s)")
        for v in rep.violations:
            print(f"  {v}")
        return events, EXIT_INVALID
    return events, EXIT_OK


def cmd_validate(args) -> int:
    events, code = _load_checked(args.events)
    if code == EXIT_OK:
        print(f"{args.events}: legal ({len(events)} events)")
    return code


def cmd_metrics(args) -> int:
    from .analytics import report

    try:
        alloc = parse_alloc(args.alloc)
    except (ValueError, InvalidSpec) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    events, code = _load_checked(args.events)
    if code != EXIT_OK:
        return code
    try:
        rep = report(events, alloc, args.bucket, args.window)
    except ValueError as exc:
        print(f"metrics: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for key, value in rep.rows():
        print(f"{key}\t{value}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rep.write(args.out)
    return EXIT_OK


def cmd_presets(args) -> int:
    from .harness.config import preset_names, preset_text

    for name in preset_names():
        first = preset_text(name).splitlines()[0]
        desc = first.lstrip("# ").strip() if first.startswith("#") else ""
        print(f"{name:<22} {desc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilotrt", description="Pilot task runtime experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file or preset name")
    r.add_argument("config")
    r.add_argument("--mode", choices=("sim", "real"))
    r.add_argument("--seed", type=int)
    r.add_argument("--time-scale", type=float, dest="time_scale")
    r.add_argument("--out", help="output root (default: experiment.output_dir or $PILOTRT_OUT)")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check an event log against the task state machine")
    v.add_argument("events")
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("metrics", help="compute metrics from an event log")
    m.add_argument("events")
    m.add_argument("alloc", help="NODESxCORES[xGPUS], e.g. 4x56x8")
    m.add_argument("--bucket", type=float, default=1.0)
    m.add_argument("--window", choices=("launch", "makespan"), default="launch")
    m.add_argument("--out", help="also write metrics CSVs here")
    m.set_defaults(func=cmd_metrics)

    ps = sub.add_parser("presets", help="bundled presets")
    ps.add_argument("action", choices=("list",))
    ps.set_defaults(func=cmd_presets)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
