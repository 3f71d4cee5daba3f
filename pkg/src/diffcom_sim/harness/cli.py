"""Command line entry point: ``diffcom-sim {run,validate,presets}``.

Output location for ``run``: ``--out`` if given, else the config's ``output``
key, else ``<experiment>.csv``; relative paths other than ``--out`` resolve
against ``$DIFFCOM_SIM_OUT`` (default: the working directory).
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config, parse_config, serialize
from .experiments import PRESETS, ExperimentError, run_experiment
from .report import timing_path, write_csv, write_timing

OUT_ENV = "DIFFCOM_SIM_OUT"


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def output_path(cfg, out=None) -> str:
    if out:
        return out
    name = cfg.output or f"{cfg.experiment}.csv"
    if os.path.isabs(name):
        return name
    return os.path.join(os.environ.get(OUT_ENV, "."), name)


def _parser():
    p = argparse.ArgumentParser(prog="diffcom-sim", description="Diffusion posterior sampling simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config and write its CSV report")
    r.add_argument("config")
    r.add_argument("--seed-override", type=_seeds, metavar="S1,S2,...", help="replace the config's seeds")
    r.add_argument("--out", help="CSV output path")
    r.add_argument("--plot", action="store_true", help="also render a PNG next to the CSV (needs matplotlib)")
    v = sub.add_parser("validate", help="check a config and print its canonical form")
    v.add_argument("config")
    pr = sub.add_parser("presets", help="list experiments, or print one preset's default config")
    pr.add_argument("name", nargs="?")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "presets":
            if args.name is None:
                for name, preset in PRESETS.items():
                    print(f"{name:20s} {preset.summary}")
                return 0
            if args.name not in PRESETS:
                print(f"error: unknown experiment {args.name!r}", file=sys.stderr)
                return 2
            print(serialize(parse_config(f'experiment = "{args.name}"\nseeds = [0]\n')), end="")
            return 0
        cfg = load_config(args.config)
        if args.command == "validate":
            print(serialize(cfg), end="")
            return 0
        if args.seed_override:
            cfg.seeds = args.seed_override
        rows = run_experiment(cfg)
        path = output_path(cfg, args.out)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        write_csv(rows, path)
        write_timing(rows, timing_path(path))
        print(f"wrote {len(rows)} rows to {path}")
        if args.plot:
            from .plotting import plot_report

            print(f"wrote figure {plot_report(rows, path)}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
