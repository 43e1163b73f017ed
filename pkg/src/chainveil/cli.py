"""Command-line entry point for scripted, reproducible runs.

Subcommands mirror the library stages: generate/ingest traces, build the
baseline ledger set, apply obfuscation pipelines, run attacks, sweep
parameters, verify chain integrity, and re-emit reports.  Every randomized
subcommand requires an explicit --seed; there is no ambient randomness.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment, ledger, obfuscate, trace
from .attacker import (
    TreeParams,
    blind_attack_on_tables,
    extract_features,
    informed_attack_on_table,
)


def _add_tree_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=3, help="gap window width W")
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--min-samples-split", type=int, default=4)
    p.add_argument("--min-impurity-decrease", type=float, default=0.0)
    p.add_argument("--cap", type=int, default=0, help="max evaluation instances per device (0 = all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainveil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a trace CSV from device profiles")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", action="store_true", help="use the built-in signature table")
    src.add_argument("--profiles", type=Path, help="JSON profile file")
    p.add_argument("--duration", type=float, required=True, help="trace length in seconds")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jitter", type=float, default=None, help="override every profile's jitter fraction")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ingest", help="parse, filter, and normalize a trace CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--blocklist", default=None, help="comma-separated device labels to drop "
                   "(default: common management protocols)")
    p.add_argument("--out", type=Path, default=None, help="write the normalized CSV here")

    p = sub.add_parser("build", help="build the baseline ledger set from a trace")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("obfuscate", help="apply an obfuscation pipeline to a trace")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--pipeline", type=Path, required=True, help="JSON pipeline spec")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("attack", help="run an identification attack on serialized ledgers")
    p.add_argument("--ledgers", type=Path, required=True, help="public view JSONL")
    p.add_argument("--sidecar", type=Path, required=True, help="ground-truth label sidecar")
    p.add_argument("--mode", choices=("informed", "blind"), default="informed")
    p.add_argument("--train-ledgers", type=Path, help="blind mode: training public view")
    p.add_argument("--train-sidecar", type=Path, help="blind mode: training sidecar")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, default=None, help="write the report JSON here (default stdout)")
    _add_tree_flags(p)

    p = sub.add_parser("sweep", help="run a configured sweep and emit report.json/sweep.csv")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--kind", choices=("run", "delay", "merge", "aggregate", "spoof", "combined"),
                   default=None, help="override the config's sweep kind")
    p.add_argument("--seed", type=int, default=None, help="override the config's base_seed")
    p.add_argument("--trials", type=int, default=None, help="override the config's trial count")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("verify", help="check chain integrity of a public view")
    p.add_argument("--ledgers", type=Path, required=True)

    p = sub.add_parser("report", help="re-emit the CSV of a saved sweep report")
    p.add_argument("--in", dest="report", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    return parser


def _tree_params(args, seed: int) -> TreeParams:
    return TreeParams(
        max_depth=args.max_depth,
        min_samples_split=args.min_samples_split,
        min_impurity_decrease=args.min_impurity_decrease,
        seed=seed,
    )


def _cmd_generate(args) -> int:
    profiles = trace.builtin_profiles() if args.builtin else trace.load_profiles(args.profiles)
    if args.jitter is not None:
        import dataclasses

        profiles = [dataclasses.replace(p, jitter_frac=args.jitter) for p in profiles]
    ts = trace.synth_trace(profiles, args.duration, args.seed)
    trace.write_csv(ts, args.out)
    print(f"wrote {len(ts)} records for {len(ts.devices)} devices to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    blocklist = (
        trace.DEFAULT_MANAGEMENT_PROTOCOLS
        if args.blocklist is None
        else frozenset(x.strip() for x in args.blocklist.split(",") if x.strip())
    )
    ts = trace.ingest_csv(args.csv, blocklist)
    print(f"{len(ts)} records, {len(ts.devices)} devices, span {ts.duration:.6f}s")
    if args.out:
        trace.write_csv(ts, args.out)
        print(f"normalized CSV written to {args.out}")
    return 0


def _write_ledger_dir(ls, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger.save_public_view(ls, out_dir / "ledgers.jsonl")
    ledger.save_sidecar(ls, out_dir / "sidecar.json")
    (out_dir / "provenance.json").write_text(
        json.dumps(list(ls.provenance), indent=1) + "\n", encoding="utf-8"
    )


def _cmd_build(args) -> int:
    ts = trace.ingest_csv(args.trace)
    ls = ledger.build_baseline(ts)
    _write_ledger_dir(ls, args.out_dir)
    print(f"{len(ls)} ledgers, {ls.n_transactions} transactions -> {args.out_dir}")
    return 0


def _cmd_obfuscate(args) -> int:
    ts = trace.ingest_csv(args.trace)
    pipeline = obfuscate.load_pipeline(args.pipeline)
    ls = obfuscate.compose(ts, pipeline, seed=args.seed)
    _write_ledger_dir(ls, args.out_dir)
    print(
        f"{len(ls)} ledgers, {ls.n_transactions} transactions "
        f"({ls.n_genuine} genuine) -> {args.out_dir}"
    )
    return 0


def _cmd_attack(args) -> int:
    view = ledger.load_public_view(args.ledgers)
    sidecar = ledger.load_sidecar(args.sidecar)
    params = _tree_params(args, args.seed)
    table = extract_features(view, args.window, sidecar)
    if args.mode == "informed":
        report = informed_attack_on_table(table, params, args.folds, args.cap)
    else:
        if not args.train_ledgers or not args.train_sidecar:
            print("error: blind mode requires --train-ledgers and --train-sidecar", file=sys.stderr)
            return 2
        train_table = extract_features(
            ledger.load_public_view(args.train_ledgers),
            args.window,
            ledger.load_sidecar(args.train_sidecar),
        )
        report = blind_attack_on_tables(train_table, table, params, args.cap)
    payload = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        args.out.write_text(payload, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        print(payload, end="")
    return 0


def _cmd_sweep(args) -> int:
    raw = json.loads(args.config.read_text(encoding="utf-8"))
    kind = args.kind or raw.pop("sweep", "run")
    values = raw.pop("values", None)
    if args.seed is not None:
        raw["base_seed"] = args.seed
    if "base_seed" not in raw:
        print("error: config has no base_seed and no --seed was given", file=sys.stderr)
        return 2
    if args.trials is not None:
        raw["trials"] = args.trials
    cfg = experiment.load_config(raw)
    if kind == "run":
        result = experiment.run(cfg)
    elif kind == "delay":
        result = experiment.sweep_delay(cfg, tuple(values) if values else (0.0, 0.5, 2.0, 30.0))
    elif kind == "merge":
        result = experiment.sweep_merge(cfg, tuple(values) if values else (1, 3, 5, 9, 13, 17))
    elif kind == "aggregate":
        result = experiment.sweep_aggregate(cfg, tuple(values) if values else (1, 2, 3, 5))
    elif kind == "spoof":
        result = experiment.sweep_spoof(cfg, tuple(values) if values else (0.0, 1.0, 2.0, 3.0))
    elif kind == "combined":
        result = experiment.sweep_combined(cfg, tuple(values) if values else (0.5, 2.0, 30.0))
    else:
        print(f"error: unknown sweep kind {kind!r}", file=sys.stderr)
        return 2
    report_path, csv_path = experiment.emit_report(result, args.out_dir)
    print(f"report written to {report_path}" + (f" and {csv_path}" if csv_path else ""))
    return 0


def _cmd_verify(args) -> int:
    view = ledger.load_public_view(args.ledgers)
    failures = 0
    for i, pl in enumerate(view.ledgers):
        fault = ledger.find_chain_fault(pl)
        if fault is None:
            print(f"ledger {i}: ok ({len(pl)} transactions)")
        else:
            failures += 1
            print(f"ledger {i}: FAIL at index {fault[0]}: {fault[1]}")
    print(f"{len(view.ledgers) - failures}/{len(view.ledgers)} ledgers verified")
    return 0 if failures == 0 else 1


def _cmd_report(args) -> int:
    result = experiment.load_sweep_result(args.report)
    report_path, csv_path = experiment.emit_report(result, args.out_dir)
    print(f"re-emitted {report_path} and {csv_path}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "ingest": _cmd_ingest,
    "build": _cmd_build,
    "obfuscate": _cmd_obfuscate,
    "attack": _cmd_attack,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
