"""Command line entry point: ``ergosim simulate|sweep|estimate|trace``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, InsufficientData, InsufficientEpochs, InvariantViolation, TraceError, ZeroRate
from .experiment import (ExperimentConfig, ExperimentResults, emit_outputs, median_rows, run_estimate,
                         run_single, run_sweep, with_overrides)
from .metrics import alpha_with_skips, detect_epochs, measure_beta
from .traces import FileSource, export_trace, generate_trace

EXIT_OK, EXIT_ERROR, EXIT_INVARIANT = 0, 1, 2

log = logging.getLogger("ergosim")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--defense", help="ergo, ergo-ch1, ergo-ch2, ergo-sfNN, ccom, sybilcontrol or remp")
    p.add_argument("--horizon", type=float, help="measured seconds after warm-up")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ergosim", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one run at a single spend rate")
    _common(p)
    p.add_argument("--T", type=float, default=None, help="adversary spend rate (units/s)")
    p.add_argument("--committee", type=int, metavar="C", help="elect and audit a committee with this C")

    p = sub.add_parser("sweep", help="spend-rate sweep with repeats")
    _common(p)
    p.add_argument("--T", type=_float_list, default=None, help="comma-separated spend rates")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("estimate", help="estimate-ratio experiment over bad fractions")
    _common(p)
    p.add_argument("--T", type=_float_list, default=None, help="comma-separated spend rates")

    p = sub.add_parser("trace", help="churn trace tooling")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    for name, text in (("gen", "generate a synthetic trace and write it as CSV"),
                       ("export", "write the configured trace (any source) as CSV")):
        tp = tsub.add_parser(name, help=text)
        tp.add_argument("--config", type=Path)
        tp.add_argument("--seed", type=int)
        tp.add_argument("--horizon", type=float, help="trace length in seconds")
        tp.add_argument("--out", type=Path, required=True, help="output CSV path")
    tp = tsub.add_parser("analyze", help="epochs and smoothness report for a trace")
    tp.add_argument("--config", type=Path)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--horizon", type=float)
    tp.add_argument("--file", type=Path, help="trace CSV to analyze instead of the configured source")
    tp.add_argument("--out", type=Path, help="write the report as JSON here")
    return parser


def _float_list(text: str) -> list:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None
    return [int(v) if v.is_integer() else v for v in values]


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, defense=getattr(args, "defense", None),
                          horizon_s=getattr(args, "horizon", None))


def _report(results: ExperimentResults, out: Path) -> int:
    emit_outputs(results, out)
    for row in results.rows:
        log.info("%s T=%s rep=%s A=%s max_bad=%s", row["defense"], row["T"], row["repeat"],
                 row["good_spend_rate"], row["max_bad_fraction"])
    print(f"wrote {len(results.rows)} rows to {out}")
    if any(r["invariant_ok"] is False for r in results.rows) or results.any_violation:
        print("invariant violation recorded; see violations.csv", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.committee is not None:
        cfg = with_overrides(cfg, committee_C=args.committee, record_iterations=True)
    T = args.T if args.T is not None else cfg.adversary.spend_rate_T
    run = run_single(cfg, T, cfg.seed)
    results = ExperimentResults(cfg, [run], median_rows([run]), seeds=[cfg.seed], kind="simulate")
    print(json.dumps(run.row, default=str))
    return _report(results, args.out)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cfg = with_overrides(cfg, sweep_T=args.T, repeats=args.repeats, workers=args.workers)
    return _report(run_sweep(cfg), args.out)


def cmd_estimate(args) -> int:
    cfg = with_overrides(_config(args), estimate_T=args.T)
    results = run_estimate(cfg)
    for row in results.estimates:
        print(json.dumps(row, default=str))
    emit_outputs(results, args.out)
    return EXIT_OK


def _trace_spec(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    spec = cfg.trace
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    duration = args.horizon if args.horizon is not None else cfg.warmup + cfg.horizon_s
    return dataclasses.replace(spec, duration=duration)


def cmd_trace(args) -> int:
    if args.trace_command == "analyze" and args.file is not None:
        spec = dataclasses.replace(_trace_spec(args), source=FileSource(str(args.file)), duration=0.0)
    else:
        spec = _trace_spec(args)
    if args.trace_command == "gen" and isinstance(spec.source, FileSource):
        raise ConfigError("trace gen needs a synthetic source; use trace export for files")
    trace = generate_trace(spec)
    if args.trace_command in ("gen", "export"):
        export_trace(trace, args.out)
        print(f"wrote {len(trace.initial_ids)} initial IDs and {len(trace.events)} events to {args.out}")
        return EXIT_OK
    events = [(ev.time, ev.is_join, ev.payload.identity.uid if ev.is_join else ev.payload.uid)
              for ev in trace.events]
    end = trace.end_time or (events[-1][0] if events else 0.0)
    epochs = detect_epochs(events, [i.uid for i in trace.initial_ids], 0.0, end)
    report = {"initial_ids": len(trace.initial_ids), "events": len(events), "end_time": end,
              "epochs": len(epochs), "complete_epochs": sum(1 for e in epochs if not e.partial),
              "suppressed_departures": trace.suppressed, "staggered_departures": trace.staggered}
    try:
        report["alpha"], report["alpha_skipped_pairs"] = alpha_with_skips(epochs)
        report["beta"], _ = measure_beta(epochs, events)
    except (InsufficientEpochs, InsufficientData, ZeroRate) as exc:
        report["smoothness_error"] = str(exc)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "estimate": cmd_estimate, "trace": cmd_trace}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        print(f"invariant violation at t={exc.time}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
