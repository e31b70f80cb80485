"""
Command-line entry point.

    python -m periodic_portfolio validate --config exp.json
    python -m periodic_portfolio solve    --config exp.json --out runs/exp
    python -m periodic_portfolio simulate --config exp.json --out runs/exp
    python -m periodic_portfolio verify   --config exp.json --out runs/exp

Exit codes: 0 success, 1 verification failure, 2 config error, 3 numerical
failure.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import load_config
from .engine.errors import ConfigError, PortfolioError
from .workflows import cmd_simulate, cmd_solve, cmd_validate, cmd_verify

logger = logging.getLogger(__name__)

# --- Constants ---
EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
COMMANDS = ("validate", "solve", "simulate", "verify")
LOG_FORMAT = "%(asctime)s - [%(levelname)s] - %(name)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="periodic_portfolio",
        description=(
            "Portfolio optimization under periodic evaluation of relative "
            "performance: solve, simulate and verify."
        ),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--config", required=True, help="Experiment config (.json, .yaml)"
    )
    parser.add_argument(
        "--out",
        default="artifacts",
        help="Output directory (default: %(default)s)",
    )
    parser.add_argument(
        "--artifacts",
        default=None,
        help="Solve output to read for simulate/verify (default: --out)",
    )
    parser.add_argument("--paths", type=int, default=None, help="Override path count")
    parser.add_argument("--seed", type=int, default=None, help="Override seed")
    parser.add_argument(
        "--route",
        choices=("dual", "policy"),
        default="dual",
        help="Rollout route for simulate (default: %(default)s)",
    )
    parser.add_argument(
        "--policy-scale",
        type=float,
        default=None,
        help="Scale the portfolio feedback in simulate/verify",
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command; exceptions propagate."""
    config = load_config(args.config).with_overrides(
        paths=args.paths, seed=args.seed
    )
    artifacts = args.artifacts or args.out

    if args.command == "validate":
        report = cmd_validate(config, args.out)
        for record in report.to_records():
            print(json.dumps(record, sort_keys=True))
        return EXIT_OK if report.passed else EXIT_VERIFICATION

    if args.command == "solve":
        outcome = cmd_solve(config, args.out)
        for name, path in outcome.files.items():
            print(f"{name}: {path}")
        return EXIT_OK

    if args.command == "simulate":
        outcome = cmd_simulate(
            config,
            artifacts,
            args.out,
            route=args.route,
            policy_scale=args.policy_scale,
        )
        objective = outcome.summary["objective"]
        print(
            f"objective: {objective['mean']:.8g} (se {objective['std_err']:.3g}), "
            f"tail <= {outcome.summary['tail_bound']:.3g}"
        )
        return EXIT_OK

    outcome = cmd_verify(config, artifacts, args.out, policy_scale=args.policy_scale)
    for check in outcome.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}: {check.name}")
    return EXIT_OK if outcome.passed else EXIT_VERIFICATION


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        return run(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except PortfolioError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (ArithmeticError, ValueError, RuntimeError) as e:
        logger.exception(f"Numerical failure: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
