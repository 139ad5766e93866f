"""Command line entry point: ``apexlab run | compare | emit-plot-data | validate-config``.

Exit codes: 0 on success, 2 on configuration or usage errors, 3 when a run
aborts on a broken invariant.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import RunConfig, format_config, load_config, with_overrides
from .errors import ConfigError, InvariantFailure

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apexlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", type=Path, help="key = value configuration file (defaults if omitted)")
    r.add_argument("--seed", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--mode")
    r.add_argument("--out", type=Path, required=True, help="run directory")
    r.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")

    c = sub.add_parser("compare", help="windowed hypervolume report over several runs")
    c.add_argument("runs", nargs="+", type=Path)
    c.add_argument("--full", type=int, default=0, help="index of the run deltas are taken against")
    c.add_argument("--out", type=Path, help="write the report here instead of stdout")

    e = sub.add_parser("emit-plot-data", help="write delimited plot data for one figure")
    e.add_argument("runs", nargs="+", type=Path)
    e.add_argument("--figure", required=True, choices=harness.FIGURES)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--smooth", type=int, default=None, nargs="?", const=20,
                   help="moving-average window (20 when given without a value)")

    v = sub.add_parser("validate-config", help="parse a configuration and print it with defaults")
    v.add_argument("--config", type=Path, required=True)
    return p


def _run(args) -> None:
    if args.resume:
        harness.resume(args.out, steps=args.steps)
        print(args.out)
        return
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = with_overrides(cfg, seed=args.seed, steps=args.steps, mode=args.mode)
    harness.run(cfg, args.out)
    print(args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            _run(args)
        elif args.command == "compare":
            text = harness.compare(args.runs, full=args.full).to_text()
            if args.out:
                args.out.write_text(text)
            else:
                sys.stdout.write(text)
        elif args.command == "emit-plot-data":
            for path in harness.emit_plot_data(args.runs, args.figure, args.out, args.smooth):
                print(path)
        else:
            sys.stdout.write(format_config(load_config(args.config)))
    except ConfigError as e:
        print(f"apexlab: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantFailure as e:
        print(f"apexlab: invariant failure: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
