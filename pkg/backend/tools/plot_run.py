#!/usr/bin/env python
"""
Plot the CSV artifacts of one run directory into PNGs next to them.

Usage:
    python backend/tools/plot_run.py runs/hrf

Draws whichever of these exist: logs/pretrain.csv (loss), logs/train.csv (mean reward per
iteration), metrics/vendi_curve.csv, inject/curves.csv (one line per injection step),
samples/eval.csv (scatter, 2-D data only).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.logging_config import configure_logging  # noqa: E402
from app.repository import RunPaths, read_csv  # noqa: E402

logger = logging.getLogger("plot_run")


def _column(rows: List[Dict[str, str]], name: str) -> List[float]:
    return [float(r[name]) for r in rows]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"PLOT WRITTEN: path={path}")
    return path


def plot_line(csv_path: Path, x: str, y: str, title: str) -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(_column(rows, x), _column(rows, y))
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_injection(csv_path: Path) -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for step in sorted({int(r["injection_step"]) for r in rows}, reverse=True):
        sub = [r for r in rows if int(r["injection_step"]) == step]
        ax.errorbar(_column(sub, "t"), _column(sub, "mean_distance"), yerr=_column(sub, "se"),
                    label=f"switch at t={step}", capsize=2)
    ax.invert_xaxis()
    ax.set_xlabel("t")
    ax.set_ylabel("cosine distance to fine-tuned run")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_samples(csv_path: Path) -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(_column(rows, "x0"), _column(rows, "x1"), s=3, alpha=0.5)
    ax.set_aspect("equal")
    ax.set_title("evaluation samples")
    return _save(fig, csv_path.with_suffix(".png"))


def plot_run(run_dir: Path) -> List[Path]:
    paths = RunPaths(run_dir)
    written = []
    if (paths.logs / "pretrain.csv").exists():
        written.append(plot_line(paths.logs / "pretrain.csv", "step", "loss", "pretraining loss"))
    if (paths.logs / "train.csv").exists():
        written.append(plot_line(paths.logs / "train.csv", "iter", "mean_reward", "fine-tuning reward"))
    if (paths.metrics / "vendi_curve.csv").exists():
        written.append(plot_line(paths.metrics / "vendi_curve.csv", "n", "vendi", "incremental Vendi score"))
    if (paths.inject / "curves.csv").exists():
        written.append(plot_injection(paths.inject / "curves.csv"))
    samples = paths.samples / "eval.csv"
    if samples.exists():
        with samples.open() as fh:
            two_dim = fh.readline().strip() == "x0,x1"
        if two_dim:
            written.append(plot_samples(samples))
    return written


def main() -> None:
    parser = argparse.ArgumentParser(description="Plot the CSV artifacts of a run directory.")
    parser.add_argument("run_dir", type=Path, help="Run directory (holds manifest.txt)")
    args = parser.parse_args()
    configure_logging()
    if not args.run_dir.is_dir():
        raise SystemExit(f"Not a directory: {args.run_dir}")
    written = plot_run(args.run_dir)
    if not written:
        logger.warning(f"NOTHING TO PLOT: run_dir={args.run_dir}")


if __name__ == "__main__":
    main()
