"""Batch command-line harness.

Verbs: ``train``, ``attack``, ``evaluate``, ``report``, ``reproduce``.
Exit codes: 0 success, 1 configuration/validation failure, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, validate_config
from .runner import ReportError, render_report, reproduce, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _add_config_args(sub):
    sub.add_argument("--config", default=None,
                     help="experiment config file (defaults apply when omitted)")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setdefense",
        description="Image-set classification defence against adversarial attacks",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    for verb, doc in (("train", "train the baseline (and defended) models"),
                      ("attack", "train, then generate the perturbed test corpus"),
                      ("evaluate", "run the full train/attack/defend/vote pipeline")):
        sub = commands.add_parser(verb, help=doc)
        _add_config_args(sub)

    report = commands.add_parser("report", help="render results files as a table")
    report.add_argument("results", nargs="+", help="results.csv files to merge")
    report.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    repro = commands.add_parser("reproduce", help="re-run a manifest and verify the results hash")
    repro.add_argument("manifest")
    return parser


def _load_config(args):
    return validate_config(args.config, args.overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train", "attack", "evaluate"):
            config = _load_config(args)
            result = run_experiment(config, stop_after=args.command)
            print(f"run directory: {result.run_dir}")
            if args.command == "evaluate":
                for row in result.rows:
                    print(f"  {row.model} adv_train={'yes' if row.adv_train else 'no'} "
                          f"R={row.ratio:g}: SV={row.sv:.2f} MV={row.mv:.2f} EWV={row.ewv:.2f}")
                print(f"results: {result.results_path} (sha256 {result.results_sha256[:16]})")
        elif args.command == "report":
            text, csv_text = render_report(args.results)
            print(csv_text if args.csv else text, end="")
        elif args.command == "reproduce":
            result, matched = reproduce(args.manifest)
            print(f"reproduced into {result.run_dir}")
            if not matched:
                print("results hash MISMATCH against manifest", file=sys.stderr)
                return EXIT_RUNTIME
            print("results hash matches manifest")
        return EXIT_OK
    except (ConfigError, ReportError, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime abort, partial outputs quarantined
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
