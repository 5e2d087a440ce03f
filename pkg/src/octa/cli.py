"""Command line entry point: ``octa <stage> --config <file> [--seed N] [--profile desk|paper]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PROFILES, load_config
from .errors import OctaError
from .pipeline import STAGES, run_all, run_stage


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octa", description="Anomaly detection and categorization pipeline.")
    p.add_argument("stage", choices=[*STAGES, "all"], help="pipeline stage to run ('all' runs every stage)")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--profile", choices=PROFILES, help="hyperparameter profile (default: desk)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, profile=args.profile, seed=args.seed)
        info = run_all(cfg) if args.stage == "all" else run_stage(args.stage, cfg)
    except OctaError as exc:
        print(f"octa {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
