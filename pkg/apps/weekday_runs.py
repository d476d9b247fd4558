#!/usr/bin/env python3
"""
Weekday sensitivity runs.

Thins a daily binary matrix to one day per week for each weekday 1..7 and
takes every weekly dataset through prepare-basis, fit and predict in its own
output directory. Results of different weekdays are left side by side.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ltpdpm.cli import run
from ltpdpm.config import DAYS_PER_WEEK, WEEKS_PER_YEAR
from ltpdpm.ingest import read_binary_matrix, thin_weekly, write_binary_matrix

logger = logging.getLogger(__name__)

STAGES = ("prepare-basis", "fit", "predict")


def weekday_dataset(daily_path: Path, weekday: int, directory: Path) -> Path:
    """Write the whole-year weekly thinning of one weekday as a binary matrix."""
    coords, daily = read_binary_matrix(daily_path)
    weekly = thin_weekly(daily, weekday)
    n_weeks = WEEKS_PER_YEAR * (weekly.shape[1] // WEEKS_PER_YEAR)
    if n_weeks == 0:
        raise ValueError(f"{daily_path} holds {daily.shape[1]} days, less than one year of weeks")
    if n_weeks < weekly.shape[1]:
        logger.info(f"weekday {weekday}: dropping {weekly.shape[1] - n_weeks} weeks past the last whole year")
    return write_binary_matrix(directory / "data.bin", coords, weekly[:, :n_weeks])


def weekday_overrides(directory: Path, dataset: Path) -> List[str]:
    root = directory.as_posix()
    return [
        f"paths.dataset='{dataset.as_posix()}'",
        "paths.dataset_format='binary-matrix'",
        f"paths.basis='{root}/basis.bin'",
        f"paths.samples='{root}/samples'",
        f"paths.output_dir='{root}/out'",
    ]


def run_weekday(config: str, daily_path: Path, weekday: int, output_root: Path, extra: Sequence[str] = (), threads: int = 1) -> int:
    """Run every stage for one weekday; returns the first non-zero exit code, else 0."""
    directory = output_root / f"weekday_{weekday}"
    directory.mkdir(parents=True, exist_ok=True)
    dataset = weekday_dataset(daily_path, weekday, directory)
    overrides = weekday_overrides(directory, dataset) + list(extra)
    for stage in STAGES:
        argv = [stage, "-c", config, "--threads", str(threads)]
        for assignment in overrides:
            argv += ["--set", assignment]
        code = run(argv)
        if code != 0:
            logger.error(f"weekday {weekday}: {stage} exited with {code}")
            return code
    logger.info(f"weekday {weekday}: finished in {directory}")
    return 0


def run_all(config: str, daily_path: Path, output_root: Path, weekdays: Sequence[int], extra: Sequence[str] = (), threads: int = 1) -> Dict[int, int]:
    return {day: run_weekday(config, daily_path, day, output_root, extra, threads) for day in weekdays}


def main(argv: Optional[Sequence[str]] = None):
    """Main entry point for the command-line application."""
    parser = argparse.ArgumentParser(
        description="Fit and predict once per weekday of a daily dataset",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python weekday_runs.py daily.bin -c run.toml
  python weekday_runs.py daily.bin -c run.toml -o weekday_runs --weekdays 1 4
  python weekday_runs.py daily.bin -c run.toml --set mcmc.n_iter=5000 --threads 4
        """
    )
    parser.add_argument("daily", help="Daily N x D binary matrix")
    parser.add_argument("-c", "--config", required=True, help="TOML run configuration shared by all weekdays")
    parser.add_argument("-o", "--output", default="weekday_runs", help="Root directory of the per-weekday runs (default: weekday_runs)")
    parser.add_argument(
        "--weekdays", type=int, nargs="+", default=list(range(1, DAYS_PER_WEEK + 1)),
        help="Weekdays to run, 1..7 (default: all)"
    )
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Extra configuration override passed to every stage")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads per stage (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s - %(message)s")

    try:
        codes = run_all(args.config, Path(args.daily), Path(args.output), args.weekdays, args.overrides, args.threads)
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(2)
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user.")
        sys.exit(0)

    for day, code in codes.items():
        print(f"weekday {day}: {'ok' if code == 0 else f'failed (exit {code})'}")
    sys.exit(max(codes.values(), default=0))


if __name__ == "__main__":
    main()
