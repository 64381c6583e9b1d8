#!/usr/bin/env python3
"""
EarCAN Experiment CLI
=====================
Run one pipeline stage, or the whole pipeline, from a config document.

Usage:
    python earcan.py run-all --config config/desk.conf
    python earcan.py run-all --config config/desk.conf --seeds 7 8 9 10 11
    python earcan.py enroll --config config/smoke.conf --output outputs/smoke
    python earcan.py session-sim --verbose

Exit codes: 0 success, 2 config error, 3 stage failure (or --strict with a
critical acceptance alert).
"""

import sys
import argparse
import logging
import json
from pathlib import Path
from typing import Dict, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import load_config
from src.errors import ConfigError, StageError
from src.alerts import AcceptanceMonitor
from src.harness import ExperimentRunner, MetricsReport, run_seed_sweep
from src.reports import TerminalReport, sweep_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

# Stage -> the runner attributes it materializes, in order
STAGES = {
    "enroll": ("enrollment",),
    "synth-corpus": ("corpora",),
    "augment": ("pairs",),
    "train": ("net", "templates"),
    "watermark": ("patched_probes",),
    "eval": ("calibration", "conditions"),
    "session-sim": ("session_stats",),
}


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%H:%M:%S"
    )


def run_stage(runner: ExperimentRunner, name: str) -> int:
    for attribute in STAGES[name]:
        getattr(runner, attribute)

    if name == "eval":
        for condition, summary in runner.conditions.items():
            print(f"  {condition:12} EER {summary['eer']:.3f} at {summary['threshold']:.3f}")
    elif name == "session-sim":
        stats = {k: v for k, v in runner.session_stats.items() if k != "scenarios"}
        print(json.dumps(stats, indent=2, sort_keys=True))
    print(f"\n[*] {name} outputs under {runner.root}")
    return EXIT_OK


def load_previous(path: Path) -> Optional[Dict]:
    """The report a previous run left at path, if any."""
    if not path.exists():
        return None
    try:
        return MetricsReport.load(path).to_dict()
    except (OSError, ValueError, TypeError) as e:
        logger.warning(f"Ignoring unreadable previous report {path}: {e}")
        return None


def run_all(runner: ExperimentRunner, strict: bool) -> int:
    previous = load_previous(runner.root / "report.json")
    report = runner.run()
    monitor = AcceptanceMonitor(
        report.to_dict(),
        previous=previous,
        thresholds={"chirp_eer_max": runner.config.evaluation.acceptance_eer},
    )
    alerts = monitor.check_all()
    TerminalReport(report, monitor.format_alerts(alerts)).print()

    if strict and monitor.critical(alerts):
        logger.error(f"{len(monitor.critical(alerts))} critical acceptance alert(s)")
        return EXIT_STAGE
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="EarCAN: ear-canal continuous authentication experiments"
    )
    parser.add_argument(
        "command",
        choices=list(STAGES) + ["run-all"],
        help="Pipeline stage to run (earlier stages run as needed)"
    )
    parser.add_argument(
        "--config", "-c",
        metavar="FILE",
        help="Config document of flat dotted keys (default: built-in defaults)"
    )
    parser.add_argument(
        "--output", "-o",
        metavar="DIR",
        help="Output root (overrides output.root and EARCAN_OUTPUT_ROOT)"
    )
    parser.add_argument(
        "--seeds",
        nargs="+",
        type=int,
        metavar="SEED",
        help="run-all only: sweep these population seeds"
    )
    parser.add_argument(
        "--strict",
        action="store_true",
        help="run-all only: exit 3 on any critical acceptance alert"
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Debug logging"
    )
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = load_config(args.config)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    if args.output:
        config.output.root = args.output

    try:
        if args.command == "run-all" and args.seeds:
            df = run_seed_sweep(config, args.seeds, Path(config.output.root))
            print(sweep_table(df.to_dict("records")))
            return EXIT_OK

        runner = ExperimentRunner(config, Path(config.output.root))
        logger.info(f"config {runner.hash}, seed {runner.seed}, output {runner.root}")
        if args.command == "run-all":
            return run_all(runner, args.strict)
        return run_stage(runner, args.command)
    except StageError as e:
        logger.error(str(e))
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
