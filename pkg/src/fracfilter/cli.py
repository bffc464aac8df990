"""``fracfilter`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PRESETS, ConfigError, load_config


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracfilter",
                                description="Joint state/parameter filtering for fractured porous media.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write CSVs and plots")
    r.add_argument("--config", help="JSON configuration file")
    r.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    r.add_argument("--filter", choices=("united", "augenkf", "both"), default="united")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="master seed override")
    r.add_argument("--scenario", action="append", help="run only this scenario (repeatable)")
    r.add_argument("--no-plots", action="store_true")

    pl = sub.add_parser("plot", help="render SVG plots from a run directory")
    pl.add_argument("--in", dest="directory", required=True)

    v = sub.add_parser("verify", help="run the built-in oracle and property checks")
    v.add_argument("--quiet", action="store_true")

    s = sub.add_parser("show-config", help="print a resolved configuration")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("run", "show-config"):
        if not (args.config or args.preset):
            print("error: give --config or --preset", file=sys.stderr)
            return 2
        overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else None
        try:
            cfg = load_config(args.config, args.preset, overrides)
        except ConfigError as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 2
        if args.command == "show-config":
            print(cfg.to_json())
            return 0
        from .experiment import ExperimentError, run_experiment

        def progress(state):
            step = state.step if hasattr(state, "step") else state["step"]
            logging.getLogger("fracfilter").info("filter step %d done", step)

        try:
            run_experiment(cfg, args.filter, args.out, args.scenario, not args.no_plots, progress)
        except ExperimentError as exc:
            print(json.dumps({"module": exc.module, "scenario": exc.scenario,
                              "filter": exc.filter_name, "error": str(exc.cause)}), file=sys.stderr)
            return 1
        return 0
    if args.command == "plot":
        from .plotting import MissingArtifactError, render_plots

        try:
            for path in render_plots(args.directory):
                print(path)
        except MissingArtifactError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    if args.command == "verify":
        from .verify import run_checks

        return 0 if run_checks((lambda s: None) if args.quiet else print) else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
