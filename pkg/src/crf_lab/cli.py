"""``crf-lab verify|flow|twin --config <path> [--output-dir <path>] [--seed <n>]``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 threshold
violation.  ``CRF_LAB_THREADS`` caps the BLAS/FFT thread pools.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from crf_lab.config import ConfigError, load_config
from crf_lab.errors import CRFError
from crf_lab.experiments import EXIT_CONFIG, EXIT_NUMERICAL, run_flow, run_twin, run_verify

DRIVERS = {"verify": run_verify, "flow": run_flow, "twin": run_twin}


def thread_limit():
    """Context capping native thread pools at ``CRF_LAB_THREADS`` when set."""
    raw = os.environ.get("CRF_LAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CRF_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CRF_LAB_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crf-lab", description="Conformal Ricci Flow numerical laboratory")
    parser.add_argument("experiment", choices=sorted(DRIVERS))
    parser.add_argument("--config", required=True, help="flat key = value configuration file")
    parser.add_argument("--output-dir", help="override output_dir from the config")
    parser.add_argument("--seed", type=int, help="override seed from the config")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, output_dir=args.output_dir, seed=args.seed, experiment=args.experiment)
        limit = thread_limit()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with limit:
            result = DRIVERS[args.experiment](cfg)
    except CRFError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    stream = sys.stdout if result.exit_code == 0 else sys.stderr
    print(f"{args.experiment}: {result.message}", file=stream)
    for path in result.files:
        print(f"  wrote {path}", file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
