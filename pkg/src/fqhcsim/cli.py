"""Command-line entry point.

    fqhcsim run CONFIG [--quick] [--seed N] [--parallelism N] [--clusters-csv CSV]
    fqhcsim report BUNDLE
    fqhcsim validate BUNDLE
    fqhcsim calibrate CONFIG --measure EyeExam --target 1.3 --runs 25
    fqhcsim dump-clusters CSV
    fqhcsim default-config
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import yaml

from .experiment import (ConfigError, ExperimentConfig, MissingRuns, emit_reports,
                         load_config, run_experiment, validation_summary)
from .population import SchemaError, builtin_cluster_specs, dump_cluster_csv, load_cluster_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fqhcsim", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write an output bundle")
    run.add_argument("config", help="experiment YAML, or a bundle manifest.json")
    run.add_argument("--quick", action="store_true",
                     help="desk-scale profile: 25 runs per cell, 500 patients")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--parallelism", type=int, help="worker processes")
    run.add_argument("--clusters-csv", help="cluster archetypes replacing the built-ins")
    run.add_argument("--output", "-o", help="bundle directory (default: config output_dir)")
    run.add_argument("--no-figures", action="store_true")

    report = sub.add_parser("report", help="recompute reports and figures for a bundle")
    report.add_argument("bundle")
    report.add_argument("--no-figures", action="store_true")

    validate = sub.add_parser("validate", help="print the pilot overlap grid of a bundle")
    validate.add_argument("bundle")

    cal = sub.add_parser("calibrate",
                         help="fit a baseline order probability to a target effect")
    cal.add_argument("config")
    cal.add_argument("--measure", required=True)
    cal.add_argument("--target", type=float, required=True,
                     help="national effect in pp at --trainings")
    cal.add_argument("--trainings", type=int, default=1)
    cal.add_argument("--quick", action="store_true")
    cal.add_argument("--runs", type=int, help="runs per cell (default: config value)")
    cal.add_argument("--iterations", type=int, default=8)

    dump = sub.add_parser("dump-clusters", help="write the built-in clusters as CSV")
    dump.add_argument("path")

    sub.add_parser("default-config", help="print the default experiment config")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "quick", False):
        cfg = cfg.quick()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    if getattr(args, "parallelism", None) is not None:
        if args.parallelism < 1:
            raise ConfigError("--parallelism must be >= 1")
        cfg = dataclasses.replace(cfg, parallelism=args.parallelism)
    if getattr(args, "clusters_csv", None):
        load_cluster_csv(args.clusters_csv)
        cfg = dataclasses.replace(cfg, clusters_csv=os.path.abspath(args.clusters_csv),
                                  cluster_specs=None)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = _apply_overrides(load_config(args.config), args)
            out = run_experiment(cfg, args.output, figures=not args.no_figures,
                                 progress=args.verbose)
            print(f"wrote {out}")
        elif args.command == "report":
            for path in emit_reports(args.bundle, figures=not args.no_figures):
                print(path)
        elif args.command == "validate":
            print(validation_summary(args.bundle))
        elif args.command == "calibrate":
            from .calibration import calibrate_order_probability
            cfg = _apply_overrides(load_config(args.config), args)
            if args.runs is not None:
                if args.runs < 2:
                    raise ConfigError("--runs must be >= 2")
                cfg = dataclasses.replace(cfg, runs_per_cell=args.runs)
            p, effect = calibrate_order_probability(cfg, args.measure, args.target,
                                                    args.trainings, args.iterations)
            print(f"order.{args.measure}: p={p:.4f} (national effect {effect:.3f} pp "
                  f"at k={args.trainings})")
        elif args.command == "dump-clusters":
            dump_cluster_csv(builtin_cluster_specs(), args.path)
        elif args.command == "default-config":
            data = dataclasses.asdict(ExperimentConfig())
            yaml.safe_dump(data, sys.stdout, sort_keys=False)
    except (ConfigError, SchemaError, MissingRuns, ValueError, KeyError) as exc:
        print(f"fqhcsim: error: {exc}", file=sys.stderr)
        return 2
    return 0
