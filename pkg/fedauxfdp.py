"""
FedAUXfdp command line

Usage:
    python fedauxfdp.py run --config sweep.json [--set key=value ...] --out results/
    python fedauxfdp.py verify-sensitivity --trials 200 --out sensitivity.csv
    python fedauxfdp.py stats --config sweep.json
    python fedauxfdp.py report --summary results/summary.json

Exit codes: 0 ok, 2 configuration error, 3 failed cells (or failed checks)
"""

import argparse
import sys
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from services.errors import ConfigError
from services.event_logger import log_event
from services.experiment import (
    EXIT_CELL_FAILURES,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    heterogeneity_report,
    load_config,
    run_sweep,
    verify_sensitivity,
    write_frame,
)
from trend_evaluation import TrendEvaluator


def _config_error(e: ConfigError) -> int:
    log_event('config_error', scope=e.key_path, details={'message': str(e), 'details': e.details})
    print(f"❌ Config error: {e}")
    for line in e.details[1:]:
        print(f"   {line}")
    return EXIT_CONFIG_ERROR


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, args.set or [])
    except ConfigError as e:
        return _config_error(e)
    return run_sweep(config, args.out).exit_code


def cmd_verify_sensitivity(args: argparse.Namespace) -> int:
    print("=" * 60)
    print("EMPIRICAL SENSITIVITY CHECK")
    print("=" * 60)
    frame = verify_sensitivity(args.trials, args.seed)
    write_frame(frame, args.out)

    ok = bool(frame['ok'].all())
    print("\n" + "=" * 60)
    print("✅ BOUND HOLDS IN EVERY CONFIGURATION" if ok else "❌ BOUND VIOLATED")
    print(f"  {args.out}")
    print("=" * 60)
    return EXIT_OK if ok else EXIT_CELL_FAILURES


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, args.set or [])
    except ConfigError as e:
        return _config_error(e)

    print("=" * 60)
    print(f"HETEROGENEITY (n={config.n_clients}, {config.repeats} seed(s))")
    print("=" * 60)
    frame = heterogeneity_report(config, args.k)
    with pd.option_context('display.float_format', '{:.3f}'.format):
        print(frame.to_string())
    if args.out:
        write_frame(frame, args.out, index=True)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    result = TrendEvaluator.load(args.summary).evaluate()
    return EXIT_OK if result['passed'] else EXIT_CELL_FAILURES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fedauxfdp',
        description='Differentially private federated ensemble distillation simulator',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run a sweep and write metrics.csv + summary.json')
    run.add_argument('--config', required=True, help='JSON experiment config')
    run.add_argument('--set', action='append', metavar='KEY=VALUE', help='override a config key')
    run.add_argument('--out', required=True, help='output directory')
    run.set_defaults(handler=cmd_run)

    verify = sub.add_parser('verify-sensitivity', help='empirical sensitivity oracle suite')
    verify.add_argument('--trials', type=int, default=200, help='neighboring pairs per configuration')
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--out', required=True, help='CSV report path')
    verify.set_defaults(handler=cmd_verify_sensitivity)

    stats = sub.add_parser('stats', help='partition heterogeneity report')
    stats.add_argument('--config', required=True, help='JSON experiment config')
    stats.add_argument('--set', action='append', metavar='KEY=VALUE', help='override a config key')
    stats.add_argument('--k', type=int, default=3, help='ranks to report')
    stats.add_argument('--out', help='optional CSV path')
    stats.set_defaults(handler=cmd_stats)

    report = sub.add_parser('report', help='trend gates over a sweep summary')
    report.add_argument('--summary', required=True, help='summary.json from a sweep')
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
