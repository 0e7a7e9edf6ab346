"""Command-line entry point: ``gleak <subcommand> --config PATH [--out DIR] [--seed N]``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness, io
from .config import ConfigError, load_config
from .data import write_raw_f32

STAGE_COMMANDS = {
    "synth-data": "data",
    "poison": "poison",
    "attack": "attack",
    "detect": "detect",
    "lambda": "lambda",
    "landscape": "landscape",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gleak", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=needs_config,
                       help="experiment YAML (GL_SECTION__KEY env vars override keys)")
        p.add_argument("--out", type=Path, help="run directory (default: output_dir from config)")
        p.add_argument("--seed", type=int, help="master seed override")
        return p

    run = common(sub.add_parser("run", help="execute the full pipeline, or one --stage"))
    run.add_argument("--stage", choices=harness.STAGES, help="run only this stage")
    for name, stage in STAGE_COMMANDS.items():
        p = common(sub.add_parser(name, help=f"run the {stage} stage on a run directory"))
        if name == "synth-data":
            p.add_argument("--format", choices=("csv", "raw_f32"), default="csv")
    rep = common(sub.add_parser("report", help="re-emit report files from a run directory"),
                 needs_config=False)
    rep.add_argument("--format", choices=("csv", "json-lines", "both"), default="both")
    return ap


def _load(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _single_stage(cfg, stage: str) -> int:
    run = harness.Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    run.path("config.yaml").write_text(cfg.dump())
    status, msg = harness.run_stage(run, stage)
    statuses = {}
    if run.path("stages.csv").exists():
        _, rows = io.read_csv(run.path("stages.csv"))
        statuses = {r[0]: (r[1], r[2]) for r in rows}
    statuses[stage] = (status, msg)
    ordered = [(s, *statuses[s]) for s in harness.STAGES if s in statuses]
    io.write_csv(run.path("stages.csv"), ["stage", "status", "message"], ordered)
    harness.emit_report(harness.load_report(run.out), run.out)
    print(f"{stage}: {status}{' (' + msg + ')' if msg else ''}")
    return 0 if status == "ok" else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            run_dir = args.out or (Path(load_config(args.config).output_dir) if args.config else None)
            if run_dir is None:
                print("report: give --out DIR or --config PATH", file=sys.stderr)
                return 2
            formats = ("csv", "json-lines") if args.format == "both" else (args.format,)
            for p in harness.emit_report(harness.load_report(run_dir), run_dir, formats):
                print(p)
            return 0
        cfg = _load(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.command == "run" and args.stage is None:
        report = harness.run_experiment(cfg)
        for stage, status, msg in report.stages:
            print(f"{stage}: {status}{' (' + msg + ')' if msg else ''}")
        print(f"{len(report.rows)} rows -> {Path(cfg.output_dir) / 'report.csv'}")
        return 1 if report.failed_stages() else 0
    stage = args.stage if args.command == "run" else STAGE_COMMANDS[args.command]
    code = _single_stage(cfg, stage)
    if args.command == "synth-data" and args.format == "raw_f32" and code == 0:
        run = harness.Run(cfg)
        for name in ("target", "aux"):
            if run.path("data", f"{name}.csv").exists():
                print(write_raw_f32(run.path("data", f"{name}.f32"), run.dataset(name)))
    return code


if __name__ == "__main__":
    sys.exit(main())
