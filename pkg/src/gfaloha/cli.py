"""Command-line front end for the sweep runner and receiver validation.

Two subcommands: `run` executes the configured load sweep and writes
the figure CSVs plus summary.json; `validate-receiver` runs the
synthetic signal-chain suites and reports pass/fail per check. Exit
code 0 on success, 1 when a validation check fails, 2 on hard errors
(bad config, unwritable output).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .experiment import (FIGURES, ExperimentConfig, run_experiment,
                         validate_receiver)
from .params import InvalidParamsError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfaloha",
        description="Grant-free asynchronous replica ALOHA experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="sweep the load grid, write figure data")
    val = sub.add_parser("validate-receiver",
                         help="run the signal-chain synthetic suites")
    for sp in (run, val):
        sp.add_argument("--config", metavar="PATH",
                        help="JSON config with system/energy/experiment sections")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default: results)")
        sp.add_argument("--seed", type=int, help="master seed override")

    run.add_argument("--figures", metavar="LIST",
                     help="comma-separated subset of " + ",".join(FIGURES))
    run.add_argument("--loads", metavar="LIST",
                     help="comma-separated load grid override")
    run.add_argument("--reps", type=int, help="repetitions per cell")
    run.add_argument("--packets", type=int,
                     help="offered packets per sweep point")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--paper-literal", action="store_true",
                     help="closed-form base interference law instead of the oracle")
    run.add_argument("--mixture", choices=("poisson", "mean-count"),
                     help="interferer-count mixture mode")

    val.add_argument("--trials", type=int,
                     help="trials per synthetic suite (default 1000)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    cfg = (ExperimentConfig.from_file(args.config) if args.config
           else ExperimentConfig())
    updates = {}
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "figures", None) is not None:
        updates["figures"] = tuple(args.figures.split(","))
    if getattr(args, "loads", None) is not None:
        updates["loads"] = tuple(float(x) for x in args.loads.split(","))
    if getattr(args, "reps", None) is not None:
        updates["reps"] = args.reps
    if getattr(args, "packets", None) is not None:
        updates["packets_per_point"] = args.packets
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "paper_literal", False):
        updates["paper_literal"] = True
    if getattr(args, "mixture", None) is not None:
        updates["mixture"] = args.mixture
    if getattr(args, "trials", None) is not None:
        updates["receiver_trials"] = args.trials
    if updates:
        cfg = replace(cfg, **updates)
    return cfg.validate()


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            summary = run_experiment(cfg)
            for path in summary["files"].values():
                print(f"wrote {path}")
            print(f"wrote {cfg.out_dir}/summary.json")
            return 0
        report = validate_receiver(cfg)
        for name in ("drift", "single_noise_free", "single_snr", "two_packet"):
            body = {k: v for k, v in report[name].items() if k != "pass"}
            state = "pass" if report[name]["pass"] else "FAIL"
            print(f"{name:<18} {state}  {body}")
        print(f"overall            {'pass' if report['pass'] else 'FAIL'}")
        return 0 if report["pass"] else 1
    except (InvalidParamsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
