"""Command-line entry point.

Exit codes: 0 ok, 1 live-smoke failure, 2 stalled run, 3 invalid scenario.
The output root defaults to ``./runs`` and can be moved with ``PERVASIVE_OUTPUT``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..domain import ContextMode
from ..sim.calibration import calibrate, constants_path, load_constants, render_constants
from ..sim.pools import POOLS
from ..sim.traces import make_drain_trace, make_fluctuating_trace, read_trace_csv, write_trace_csv
from .presets import Preset, ladder, parse_batch, resolve
from .runner import (
    EXIT_INVALID,
    EXIT_OK,
    EXIT_STALLED,
    ExperimentPlan,
    compare,
    output_root,
    run,
    summaries,
    sweep_batch,
)
from .scenario_file import ScenarioFileError, build_scenario, load_scenario_file

log = logging.getLogger("pervasive")


def _batches(text: str) -> list[int]:
    return [parse_batch(x) for x in text.split(",") if x.strip()]


def _flag_overrides(args) -> dict:
    spec = {}
    for key in ("context_mode", "batch_size", "total_inferences", "seed", "transfer_cap", "start_threshold"):
        value = getattr(args, key, None)
        if value is not None:
            spec[key] = value
    return spec


def _print_runs(result) -> None:
    print(f"{'run':<12} {'status':<10} {'makespan_s':>11} {'completed':>10} {'avg_workers':>11} {'evictions':>9} {'lost':>7}")
    for r in result.runs:
        s = r.summary
        print(
            f"{r.run_id:<12} {s.status:<10} {s.makespan:>11.1f} {s.completed_inferences:>10} "
            f"{s.avg_connected_workers:>11.2f} {s.evictions:>9} {s.inferences_lost:>7}"
        )
    print(f"artifacts: {result.directory}")


def cmd_run(args) -> int:
    cal = load_constants(args.constants)
    presets: list[Preset] = []
    try:
        names = list(args.preset or [])
        if args.ladder:
            names += ladder()
        if args.compare:
            names.append(args.compare)
        flags = _flag_overrides(args)
        for name in names:
            p = resolve(name, cal)
            if flags:
                cfg, _ = build_scenario(flags, p.config, cal)
                p = replace(p, config=cfg)
            presets.append(p)
        reps = args.repetitions
        if args.scenario:
            base = None
            if flags:
                base, _ = build_scenario(flags, None, cal)
            cfg, drained, file_reps = load_scenario_file(args.scenario, base, cal)
            presets.append(Preset(cfg.name, cfg, ends_drained=drained))
            reps = max(reps, file_reps)
    except (KeyError, ValueError, ScenarioFileError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not presets:
        print("nothing to run: give --preset, --ladder or --scenario", file=sys.stderr)
        return EXIT_INVALID
    name = args.name or "+".join(p.name for p in presets)
    out = Path(args.output_dir) if args.output_dir else output_root() / name
    plan = ExperimentPlan(name, presets, reps, out, write_events=not args.no_events)
    result = run(plan, progress=lambda r: log.info("%s: %s", r.run_id, r.sim.status))
    if result.exit_code == EXIT_INVALID:
        for p in result.problems:
            print(f"invalid scenario: {p}", file=sys.stderr)
        return EXIT_INVALID
    _print_runs(result)
    if args.compare and len(presets) >= 2:
        by_id = summaries(result.runs)
        a, b = presets[-2].name, presets[-1].name
        c = compare(by_id[a], by_id[b])
        print(
            f"{a} vs {b}: completed at pool exhaustion {c['completed_a']} vs {c['completed_b']} "
            f"(gap {c['completed_gap']}), lost {c['lost_a']} vs {c['lost_b']}, "
            f"makespan diff {c['makespan_diff_s']:.1f} s"
        )
    for p in result.problems:
        print(f"stalled: {p}", file=sys.stderr)
    return result.exit_code


def cmd_sweep(args) -> int:
    try:
        sizes = _batches(args.batch_sizes)
        res = sweep_batch(args.context_mode, sizes, args.pool, args.seed, load_constants(args.constants))
    except ValueError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"stalled: {exc}", file=sys.stderr)
        return EXIT_STALLED
    print(res.render())
    print(f"max/min makespan: {res.spread:.3f}")
    return EXIT_OK


def cmd_trace_gen(args) -> int:
    cal = load_constants(args.constants)
    if args.kind == "drain":
        pool = POOLS[args.pool](cal=cal)
        trace = make_drain_trace(pool.profiles(), args.warmup, args.rate)
    else:
        trace = make_fluctuating_trace(args.seed, args.min_workers, args.max_workers, args.mean_dwell, args.horizon, cal)
    write_trace_csv(trace, args.out)
    print(f"wrote {len(trace.events)} events to {args.out}")
    return EXIT_OK


def cmd_trace_replay(args) -> int:
    cal = load_constants(args.constants)
    try:
        trace = read_trace_csv(args.trace, cal)
        base = resolve("pv4_100", cal).config
        spec = {"name": args.name or Path(args.trace).stem, **_flag_overrides(args)}
        cfg, _ = build_scenario(spec, replace(base, trace=trace), cal)
    except (ValueError, KeyError, OSError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.output_dir) if args.output_dir else output_root() / cfg.name
    result = run(ExperimentPlan(cfg.name, [Preset(cfg.name, cfg, ends_drained=args.allow_drained)], 1, out))
    if result.exit_code == EXIT_INVALID:
        print("\n".join(result.problems), file=sys.stderr)
        return EXIT_INVALID
    _print_runs(result)
    return result.exit_code


def cmd_live(args) -> int:
    from .live import STALLED, live_smoke

    report = live_smoke(
        workers=args.workers,
        tasks=args.tasks,
        batch=args.batch_size,
        mode=args.context_mode,
        kill_at=None if args.no_kill else args.kill_at,
        timeout=args.timeout,
    )
    print(report.render())
    if not report.passed:
        for wid, text in report.worker_logs.items():
            if text.strip():
                print(f"--- worker {wid} log ---\n{text}", file=sys.stderr)
        return EXIT_STALLED if report.status == STALLED else 1
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cal = calibrate()
    text = render_constants(cal)
    path = Path(args.output) if args.output else constants_path()
    path.write_text(text)
    print(text, end="")
    print(f"wrote {path}")
    return EXIT_OK


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--context-mode", dest="context_mode", choices=[m.value for m in ContextMode])
    p.add_argument("--batch-size", dest="batch_size", type=parse_batch)
    p.add_argument("--total-inferences", dest="total_inferences", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--transfer-cap", dest="transfer_cap", type=int)
    p.add_argument("--start-threshold", dest="start_threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pervasive", description="Pervasive context management simulator and harness")
    parser.add_argument("--constants", help="calibration constants file (default: the packaged one)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run presets or a scenario file")
    p.add_argument("--preset", action="append", help=f"preset name, repeatable ({', '.join(ladder())})")
    p.add_argument("--ladder", action="store_true", help="run the full preset ladder")
    p.add_argument("--scenario", help="YAML scenario file; its keys override flags")
    p.add_argument("--compare", metavar="PRESET", help="also run PRESET and report the gap to it")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--output-dir")
    p.add_argument("--name")
    p.add_argument("--no-events", action="store_true", help="skip writing events.jsonl")
    _scenario_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-batch", help="makespan per batch size on one pool")
    p.add_argument("--context-mode", dest="context_mode", choices=[m.value for m in ContextMode], default="partial")
    p.add_argument("--batch-sizes", default="1,100,1000,3000,7500")
    p.add_argument("--pool", choices=sorted(POOLS), default="mixed-20")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="generate or replay availability traces")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    g = tsub.add_parser("gen")
    g.add_argument("--kind", choices=("drain", "fluctuating"), default="fluctuating")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-workers", type=int, default=11)
    g.add_argument("--max-workers", type=int, default=64)
    g.add_argument("--mean-dwell", type=float, default=10.0, help="minutes")
    g.add_argument("--horizon", type=float, default=240.0, help="minutes")
    g.add_argument("--pool", choices=sorted(POOLS), default="mixed-20")
    g.add_argument("--warmup", type=float, default=15.0, help="minutes before the drain starts")
    g.add_argument("--rate", type=float, default=1.0, help="workers evicted per minute")
    g.set_defaults(func=cmd_trace_gen)
    r = tsub.add_parser("replay")
    r.add_argument("trace")
    r.add_argument("--output-dir")
    r.add_argument("--name")
    r.add_argument("--allow-drained", action="store_true", help="treat running out of workers as success")
    _scenario_flags(r)
    r.set_defaults(func=cmd_trace_replay)

    p = sub.add_parser("live-smoke", help="real manager and worker processes on loopback")
    p.add_argument("--workers", type=int, default=3)
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--context-mode", dest="context_mode", choices=("partial", "pervasive"), default="pervasive")
    p.add_argument("--kill-at", type=float, default=0.5, help="fraction of tasks done before a hard kill")
    p.add_argument("--no-kill", action="store_true")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_live)

    p = sub.add_parser("calibrate", help="fit the workload constants and write the constants file")
    p.add_argument("--output", help="where to write (default: the packaged constants file)")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which would read as a stalled run
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
