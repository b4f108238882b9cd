"""Command line entry point: ``probmix <subcommand> --config FILE [--set key=value ...] --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checks, runner

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

log = logging.getLogger("probmix")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probmix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="JSON experiment configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path, e.g. training.epochs=50")
        if out:
            p.add_argument("--out", type=Path, help="output directory")
        return p

    common(sub.add_parser("generate", help="write synthetic dataset CSVs"))
    p = common(sub.add_parser("train", help="train one model per configured seed"))
    p.add_argument("--no-checkpoint", action="store_true")
    p = common(sub.add_parser("sweep", help="grid over the 'sweep' block times seeds"))
    p.add_argument("--no-checkpoint", action="store_true")
    p.add_argument("--workers", type=int)
    p = common(sub.add_parser("eval", help="evaluate a saved checkpoint"), out=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("export-plots", help="plot-ready CSV tables from a results file")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--kind", choices=["auto", "density", "boundary"], default="auto")
    p.add_argument("--out", type=Path)
    p.add_argument("--grid-points", type=int, default=200)
    p = sub.add_parser("selftest", help="golden values and equivalence checks")
    p.add_argument("--trials", type=int, default=100)
    return parser


def _print_records(records) -> None:
    writer_rows = runner.record_rows(records)
    print(",".join(runner.RESULTS_HEADER))
    for row in writer_rows:
        print(",".join(row))


def _dispatch(args) -> int:
    if args.command == "selftest":
        results = [checks.golden_values(), *checks.theorem_suite(args.trials), checks.closure(),
                   checks.endpoint_reduction(), checks.jensen_ordering(batches=200)]
        for r in results:
            print(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST
    if args.command == "export-plots":
        paths = runner.run_export_plots(args.results, args.kind, args.out, args.grid_points)
        for p in paths:
            print(p)
        return EXIT_OK

    cfg = runner.load_config(args.config, args.overrides)
    if args.command == "generate":
        for p in runner.run_generate(cfg, args.out or cfg["output_dir"]):
            print(p)
    elif args.command == "train":
        cfg["sweep"] = {}
        out = args.out or Path(cfg["output_dir"])
        summary = runner.run_sweep(cfg, out, save_checkpoints=not args.no_checkpoint)
        print(summary.path)
        if summary.failed:
            print(f"error: {summary.failed} run(s) failed, see {summary.path}", file=sys.stderr)
            return EXIT_RUNTIME
    elif args.command == "sweep":
        if args.workers:
            cfg["workers"] = args.workers
        summary = runner.run_sweep(cfg, args.out, save_checkpoints=not args.no_checkpoint)
        print(summary.path)
        print(f"completed={summary.completed} skipped={summary.skipped} failed={summary.failed}",
              file=sys.stderr)
    elif args.command == "eval":
        seed = args.seed if args.seed is not None else cfg["training"]["seeds"][0]
        _print_records(runner.run_eval(cfg, args.checkpoint, seed))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a runtime failure exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
