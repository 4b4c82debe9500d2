#!/usr/bin/env python
"""
Train and freeze the ring-proximity scorer used by the fixed_scorer reward.

Usage:
    python backend/tools/build_scorer.py --out data/ring_scorer.bin --radius 3.0 --seed 0

Refuses to overwrite an existing checkpoint unless --force is given, so every run that
names the same scorer_path scores against the same frozen network.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.logging_config import configure_logging  # noqa: E402
from app.nn_core import save_params  # noqa: E402
from app.rewards import train_ring_scorer  # noqa: E402

logger = logging.getLogger("build_scorer")


def main() -> None:
    parser = argparse.ArgumentParser(description="Train the frozen ring-proximity scorer.")
    parser.add_argument("--out", type=Path, default=Path("data/ring_scorer.bin"), help="Checkpoint path")
    parser.add_argument("--radius", type=float, default=3.0, help="Ring radius the scorer rewards")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--force", action="store_true", help="Overwrite an existing checkpoint")
    args = parser.parse_args()
    configure_logging()

    if args.out.exists() and not args.force:
        raise SystemExit(f"{args.out} exists; pass --force to retrain")
    params, val_mse = train_ring_scorer(args.radius, np.random.default_rng(args.seed), steps=args.steps)
    save_params(params, args.out)
    logger.info(f"SCORER SAVED: path={args.out}, radius={args.radius}, val_mse={val_mse:.4f}")


if __name__ == "__main__":
    main()
