"""Command line: ``thermolimit run | compare | list``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import traceback

from . import io
from .experiments import (
    EXPERIMENT_IDS, ConfigError, ExperimentConfig, compare_reconstructions, load_reconstruction, run_experiment,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the message format uniform
        self.print_usage(sys.stderr)
        print(f"config error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thermolimit", description="Thermal resolution-limit experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--out", help="output directory (overrides the config's 'out')")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for independent pieces")

    cmp_ = sub.add_parser("compare", help="compare two phantom-pipeline reconstructions")
    cmp_.add_argument("--a", required=True, help="run directory (reference, e.g. T-SVD)")
    cmp_.add_argument("--b", required=True, help="run directory (candidate, e.g. ADMM)")
    cmp_.add_argument("--method-a", help="method inside --a when it holds two")
    cmp_.add_argument("--method-b", help="method inside --b when it holds two")
    cmp_.add_argument("--window", type=float, default=20.0, help="lateral peak search half-width")

    sub.add_parser("list", help="print experiment ids")
    return parser


def _cmd_run(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed: must be nonnegative")
            cfg.seed = args.seed
        if args.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        out = args.out or cfg.out
        if not out:
            raise ConfigError("out: no output directory given (use --out or the config's 'out')")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        manifest = run_experiment(cfg, out, jobs=args.jobs)
    except Exception as exc:  # noqa: BLE001 - reported with diagnostics
        print(f"runtime error in {cfg.experiment!r}: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - start
    print(io.dumps_json({"experiment": cfg.experiment, "out": str(out), "summary": manifest["summary"]}), end="")
    print(f"wrote {len(manifest['files'])} data files in {elapsed:.2f} s", file=sys.stderr)
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        a, centers_a, ma = load_reconstruction(args.a, args.method_a)
        b, centers_b, mb = load_reconstruction(args.b, args.method_b)
        if [list(map(float, c)) for c in centers_a] != [list(map(float, c)) for c in centers_b]:
            raise ValueError("runs have different phantoms")
        report = compare_reconstructions(a, b, centers_a, window=args.window, labels=(ma, mb))
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(io.dumps_json(report.to_dict()), end="")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print("\n".join(EXPERIMENT_IDS))
        return EXIT_OK
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
