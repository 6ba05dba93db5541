"""Command-line entry point: ``entmem <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from entmem import pipeline
from entmem.errors import EntmemError
from entmem.script import ScriptSyntaxError, SchemaError, ValidationError, parse_script, validate_script


def _load_config(args) -> pipeline.RunConfig:
    config = pipeline.RunConfig.load(args.config)
    if getattr(args, "update_every", None) is not None:
        config = replace(config, update_every=args.update_every)
    return config


def _run_dir(args, config: pipeline.RunConfig) -> Path:
    return Path(args.run_dir) if args.run_dir else config.resolve(config.output_dir)


def cmd_validate_script(args) -> int:
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            script = parse_script(Path(args.file).read_bytes(), validate=False)
    except (ScriptSyntaxError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    diagnostics = validate_script(script)
    for w in caught:
        print(f"warning: {w.message}")
    for d in diagnostics:
        print(d)
    if not diagnostics:
        n_entities = len(script.declarations())
        print(f"ok: {script.story_name!r}, {n_entities} entities, {len(script.shots)} shots")
    return 1 if diagnostics else 0


def cmd_init_bank(args) -> int:
    config = _load_config(args)
    script = pipeline.load_script(config)
    run_dir = _run_dir(args, config)
    bank = pipeline.prepare_run_dir(script, config, run_dir)
    for eid in bank.entity_ids():
        print(f"{eid}: {len(bank.entries[eid])} entries, {bank.token_cost(eid)} tokens")
    print(f"bank written to {pipeline.bank_path(run_dir, 0)}")
    return 0


def cmd_step(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(args, config)
    result = pipeline.step(run_dir, args.shot, config)
    print(result.cost.to_text(), end="")
    for u in result.updates:
        print(f"keyframe {u.keyframe} {u.entity}: {u.decision}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    script = pipeline.load_script(config)
    run_dir = _run_dir(args, config)
    pipeline.run_story(script, config, run_dir)
    print((run_dir / "reports" / "summary.txt").read_text(), end="")
    return 0


def cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = pipeline.metrics_from_run_dir(run_dir)
    results = pipeline.load_shot_results(run_dir)
    pipeline.emit_reports(results, metrics, run_dir / "reports")
    print((run_dir / "reports" / "metrics.json").read_text(), end="")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    results = pipeline.load_shot_results(run_dir)
    metrics = pipeline.metrics_from_run_dir(run_dir) if results else None
    pipeline.emit_reports(results, metrics, run_dir / "reports")
    print((run_dir / "reports" / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entmem", description="Entity-memory multi-shot pipeline (mock backbone).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-script", help="parse and validate a story script")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_script)

    p = sub.add_parser("init-bank", help="build the initial bank from reference assets")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_init_bank)

    p = sub.add_parser("step", help="run a single shot against the previous bank snapshot")
    p.add_argument("--shot", type=int, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--update-every", type=int)
    p.set_defaults(func=cmd_step)

    p = sub.add_parser("run", help="run the whole story")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--update-every", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="recompute CSC / CSC* / BGA from a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="regenerate report tables for a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"invalid script: {exc}", file=sys.stderr)
        return 1
    except (EntmemError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
